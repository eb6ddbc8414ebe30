#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "promptrisk/common.hpp"
#include "promptrisk/numcore/tensor.hpp"

namespace promptrisk::nc {

enum class Tag : std::uint8_t { Trainable = 0, Frozen = 1 };

struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> grad;  // empty until first accumulation
  Tag tag = Tag::Trainable;

  bool trainable() const { return tag == Tag::Trainable; }

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using ParamId = std::size_t;

// Named parameters with their trainable/frozen partition and the optimizer
// state of the trainable ones.
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor value, Tag tag = Tag::Trainable) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), std::move(value), {}, tag});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](ParamId id) { return params_.at(id); }
  const Parameter& operator[](ParamId id) const { return params_.at(id); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  ParamId id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  Parameter& at(const std::string& name) { return params_[id(name)]; }
  const Parameter& at(const std::string& name) const { return params_[id(name)]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable()) n += p.value.size();
    return n;
  }

  void set_all(Tag tag) {
    for (auto& p : params_) p.tag = tag;
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
  }

  // Snapshot/restore of values only (used for best-epoch model selection).
  std::vector<Tensor> values() const {
    std::vector<Tensor> out;
    for (const auto& p : params_) out.push_back(p.value);
    return out;
  }
  void restore(const std::vector<Tensor>& v) {
    if (v.size() != params_.size()) throw DimensionError("restore: parameter count mismatch");
    for (std::size_t i = 0; i < v.size(); ++i) params_[i].value = v[i];
  }

  // Adaptive-moment state.
  struct Moments {
    std::vector<double> m, v;
  };
  std::vector<Moments>& moments() {
    if (moments_.size() != params_.size()) moments_.resize(params_.size());
    return moments_;
  }
  long& step_count() { return step_; }
  void reset_optimizer() {
    moments_.clear();
    step_ = 0;
    for (auto& p : params_) p.grad.clear();
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, ParamId> index_;
  std::vector<Moments> moments_;
  long step_ = 0;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over the trainable parameters. Frozen parameters and
// parameters without an accumulated gradient are left untouched.
inline void adam_step(ParameterStore& store, const AdamConfig& cfg = {}) {
  if (!(cfg.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
    throw ConfigError("adam: betas must lie in [0, 1)");
  auto& moments = store.moments();
  const long t = ++store.step_count();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    if (!p.trainable() || p.grad.size() != p.value.size()) continue;
    auto& [m, v] = moments[i];
    if (m.size() != p.value.size()) m.assign(p.value.size(), 0.0), v.assign(p.value.size(), 0.0);
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      p.value.data[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

// Rescales trainable gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store)
    if (p.trainable())
      for (double g : p.grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : store)
      if (p.trainable())
        for (double& g : p.grad) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoint container.
//
//   "PRCKPT01"
//   u32 n_meta   { u32 len, key bytes, u32 len, value bytes } * n_meta
//   u32 n_params { u32 len, name, u8 tag, u32 ndim, u64 dims[ndim],
//                  f64 values[prod(dims)] } * n_params
//
// All integers and floats little-endian.

using Metadata = std::map<std::string, std::string>;

inline constexpr std::string_view kCheckpointMagic = "PRCKPT01";

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  auto u = std::bit_cast<std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xffU));
}

inline void put_str(std::string& out, std::string_view s) {
  put_le(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    need(sizeof(T));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return std::bit_cast<T>(u);
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ParameterStore& store, const Metadata& meta = {}) {
  std::string out(kCheckpointMagic);
  detail::put_le(out, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    detail::put_str(out, k);
    detail::put_str(out, v);
  }
  detail::put_le(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store) {
    detail::put_str(out, p.name);
    detail::put_le(out, static_cast<std::uint8_t>(p.tag));
    detail::put_le(out, static_cast<std::uint32_t>(p.value.shape.size()));
    for (auto d : p.value.shape) detail::put_le(out, static_cast<std::uint64_t>(d));
    for (double x : p.value.data) detail::put_le(out, x);
  }
  return out;
}

struct Checkpoint {
  ParameterStore store;
  Metadata meta;
};

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  detail::Reader r(bytes);
  if (r.take(kCheckpointMagic.size()) != kCheckpointMagic) throw IoError("not a checkpoint (bad magic)");
  Checkpoint ck;
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.str();
    ck.meta[k] = r.str();
  }
  const auto n_params = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    auto name = r.str();
    const auto tag = r.get<std::uint8_t>();
    if (tag > 1) throw IoError("checkpoint: bad tag for '" + name + "'");
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    Tensor t(shape);
    for (auto& x : t.data) x = r.get<double>();
    ck.store.add(std::move(name), std::move(t), static_cast<Tag>(tag));
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return ck;
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::string& path, const ParameterStore& store, const Metadata& meta = {}) {
  write_file(path, serialize_checkpoint(store, meta));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

// Hash of names, shapes and values; independent of tags and metadata.
inline std::uint64_t content_hash(const ParameterStore& store) {
  std::string buf;
  std::uint64_t h = kFnvOffset;
  for (const auto& p : store) {
    buf.clear();
    detail::put_str(buf, p.name);
    for (auto d : p.value.shape) detail::put_le(buf, static_cast<std::uint64_t>(d));
    for (double x : p.value.data) detail::put_le(buf, x);
    h = fnv1a(buf, h);
  }
  return h;
}

}  // namespace promptrisk::nc
