#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "promptrisk/common.hpp"
#include "promptrisk/corpus.hpp"

namespace promptrisk {

class UndefinedAgeError : public Error {
 public:
  using Error::Error;
};

struct CohortConfig {
  int min_age_years = 40;
  long pos_window_min_days = 150;
  long pos_window_max_days = 730;
  long neg_window_days = 730;
  DateRange collection_period{};

  void validate() const {
    if (pos_window_min_days <= 0) throw ConfigError("pos_window_min_days must be positive");
    if (pos_window_max_days <= pos_window_min_days)
      throw ConfigError("pos_window_max_days must exceed pos_window_min_days");
    if (neg_window_days <= 0) throw ConfigError("neg_window_days must be positive");
    if (collection_period.end < collection_period.start) throw ConfigError("collection_period is empty");
  }
};

// Latest dated note, optionally restricted to a collection period.
inline OptionalDate last_note_date(const Patient& p, const DateRange* period = nullptr) {
  OptionalDate best;
  for (const auto& n : p.notes) {
    if (!n.date || (period && !period->contains(*n.date))) continue;
    if (!best || *n.date > *best) best = n.date;
  }
  return best;
}

// Age = calendar year of the most recent dated note minus birth year.
inline int patient_age(const Patient& p, const DateRange* period = nullptr) {
  const auto last = last_note_date(p, period);
  if (!last) throw UndefinedAgeError("patient " + p.patient_id + " has no dated notes; age is undefined");
  return year_of(*last) - p.birth_year;
}

// Negatives are anchored on the patient's last in-period note: a note is valid
// when it falls at most neg_window_days before that note.
inline bool is_note_valid(const Note& note, const Patient& patient, const CohortConfig& config) {
  if (!note.date || !config.collection_period.contains(*note.date)) return false;
  if (patient.diagnosis_date) {
    const long before = days_between(*patient.diagnosis_date, *note.date);
    return before >= config.pos_window_min_days && before <= config.pos_window_max_days;
  }
  const auto last = last_note_date(patient, &config.collection_period);
  if (!last) return false;
  const long age_days = days_between(*last, *note.date);
  return age_days >= 0 && age_days <= config.neg_window_days;
}

// The labelled patient set: eligible patients carrying only their valid notes.
inline Corpus build_cohort(const Corpus& corpus, const CohortConfig& config) {
  config.validate();
  Corpus out;
  for (const auto& p : corpus) {
    if (!last_note_date(p, &config.collection_period)) continue;
    if (patient_age(p, &config.collection_period) < config.min_age_years) continue;
    Patient kept = p;
    kept.notes.clear();
    for (const auto& n : p.notes)
      if (is_note_valid(n, p, config)) kept.notes.push_back(n);
    if (!kept.notes.empty()) out.push_back(std::move(kept));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

inline constexpr std::array<const char*, 4> kSplitNames = {"train", "valid", "test_1", "test_2"};

struct SplitSpec {
  // Proportions of the reference balanced dataset (692/259/85/697 of 1733
  // per class), i.e. roughly 40/15/5/40.
  std::array<double, 4> fractions = {692.0 / 1733.0, 259.0 / 1733.0, 85.0 / 1733.0, 697.0 / 1733.0};
  std::uint64_t seed = 1;

  void validate() const {
    double sum = 0.0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
      if (!(fractions[i] >= 0.0)) throw ConfigError(std::string("split fraction '") + kSplitNames[i] + "' is negative");
      sum += fractions[i];
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  }
};

struct DatasetBundle {
  Corpus train, valid, test_1, test_2;
  std::uint64_t seed = 0;

  std::array<const Corpus*, 4> splits() const { return {&train, &valid, &test_1, &test_2}; }
  std::array<Corpus*, 4> splits() { return {&train, &valid, &test_1, &test_2}; }
};

struct ClassCounts {
  std::size_t positive = 0, negative = 0;
  std::size_t total() const { return positive + negative; }
  bool operator==(const ClassCounts&) const = default;
};

inline ClassCounts class_counts(const Corpus& patients) {
  ClassCounts c;
  for (const auto& p : patients) (p.positive() ? c.positive : c.negative)++;
  return c;
}

// Largest-remainder apportionment of n items; equal remainders go to the
// earlier split.
inline std::array<std::size_t, 4> apportion(std::size_t n, const std::array<double, 4>& fractions) {
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double exact = static_cast<double>(n) * fractions[i];
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  std::array<std::size_t, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; k = (k + 1) % 4, ++assigned) counts[order[k]]++;
  return counts;
}

namespace detail {

inline void split_class(std::vector<const Patient*> members, const SplitSpec& spec, Rng& rng,
                        DatasetBundle& bundle) {
  std::shuffle(members.begin(), members.end(), rng);
  const auto counts = apportion(members.size(), spec.fractions);
  auto out = bundle.splits();
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t i = 0; i < counts[s]; ++i) out[s]->push_back(*members[cursor++]);
}

inline void sort_by_id(Corpus& c) {
  std::sort(c.begin(), c.end(), [](const Patient& a, const Patient& b) { return a.patient_id < b.patient_id; });
}

}  // namespace detail

// Stratified split of `patients`: each class is apportioned separately.
inline DatasetBundle stratified_split(const Corpus& patients, const SplitSpec& spec) {
  spec.validate();
  DatasetBundle bundle;
  bundle.seed = spec.seed;
  Rng rng(derive_seed(spec.seed, "split"));
  std::vector<const Patient*> pos, neg;
  for (const auto& p : patients) (p.positive() ? pos : neg).push_back(&p);
  detail::split_class(std::move(pos), spec, rng, bundle);
  detail::split_class(std::move(neg), spec, rng, bundle);
  for (auto* s : bundle.splits()) detail::sort_by_id(*s);
  return bundle;
}

// All positives plus an equal-size uniform sample of negatives, split.
inline DatasetBundle build_balanced(const Corpus& cohort, const SplitSpec& spec) {
  spec.validate();
  std::vector<const Patient*> pos, neg;
  for (const auto& p : cohort) (p.positive() ? pos : neg).push_back(&p);
  if (pos.empty()) throw InfeasibleError("balanced dataset needs at least one positive patient");
  if (neg.size() < pos.size())
    throw InfeasibleError("balanced dataset needs " + std::to_string(pos.size()) + " negatives but only " +
                          std::to_string(neg.size()) + " are available");
  Rng rng(derive_seed(spec.seed, "balanced"));
  std::shuffle(neg.begin(), neg.end(), rng);
  Corpus selected;
  selected.reserve(2 * pos.size());
  for (const auto* p : pos) selected.push_back(*p);
  for (std::size_t i = 0; i < pos.size(); ++i) selected.push_back(*neg[i]);
  return stratified_split(selected, spec);
}

// Test set with ratio 1:r built around the bundle's test_2 positives. The
// bundle's own test_2 negatives come first; the rest are drawn from cohort
// negatives outside the bundle in a fixed seeded order, so sets for larger
// ratios contain those for smaller ones.
inline Corpus build_imbalanced_test(const Corpus& cohort, const DatasetBundle& bundle, std::size_t ratio) {
  if (ratio < 1) throw ConfigError("imbalance ratio must be a positive integer");
  Corpus out;
  Corpus own_negatives;
  for (const auto& p : bundle.test_2) (p.positive() ? out : own_negatives).push_back(p);
  const std::size_t n_pos = out.size();
  const std::size_t need = n_pos * ratio;

  std::unordered_set<std::string> used;
  for (const auto* s : bundle.splits())
    for (const auto& p : *s) used.insert(p.patient_id);
  std::vector<const Patient*> pool;
  for (const auto& p : cohort)
    if (!p.positive() && !used.count(p.patient_id)) pool.push_back(&p);
  Rng rng(derive_seed(bundle.seed, "imbalanced"));
  std::shuffle(pool.begin(), pool.end(), rng);

  const std::size_t available = own_negatives.size() + pool.size();
  if (available < need)
    throw InfeasibleError("1:" + std::to_string(ratio) + " test set needs " + std::to_string(need) +
                          " negatives but only " + std::to_string(available) + " are available (short by " +
                          std::to_string(need - available) + ")");
  std::size_t taken = 0;
  for (auto& p : own_negatives) {
    if (taken == need) break;
    out.push_back(std::move(p));
    ++taken;
  }
  for (std::size_t i = 0; taken < need; ++i, ++taken) out.push_back(*pool[i]);
  return out;
}

struct FewShotSet {
  std::size_t k = 0;
  Corpus train, valid;
};

inline const std::vector<std::size_t>& default_fewshot_sizes() {
  static const std::vector<std::size_t> ks = {2, 4, 8, 16, 32, 64, 128};
  return ks;
}

// k patients in total per split (k/2 per class). The per-class draw order is
// fixed by `seed` alone, so the set for k is a prefix of the set for 2k.
inline FewShotSet build_fewshot(const DatasetBundle& bundle, std::size_t k, std::uint64_t seed) {
  if (k < 2 || k % 2 != 0) throw ConfigError("few-shot size k must be a positive even number, got " + std::to_string(k));
  const std::size_t half = k / 2;
  auto draw = [&](const Corpus& split, const char* name) {
    std::vector<const Patient*> pos, neg;
    for (const auto& p : split) (p.positive() ? pos : neg).push_back(&p);
    if (pos.size() < half || neg.size() < half)
      throw InfeasibleError("few-shot size k=" + std::to_string(k) + " needs " + std::to_string(half) +
                        " patients per class in " + name + " (have " + std::to_string(pos.size()) + " positive, " +
                        std::to_string(neg.size()) + " negative)");
    Rng rng(derive_seed(seed, std::string("fewshot.") + name));
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    Corpus out;
    for (std::size_t i = 0; i < half; ++i) out.push_back(*pos[i]);
    for (std::size_t i = 0; i < half; ++i) out.push_back(*neg[i]);
    return out;
  };
  FewShotSet fs;
  fs.k = k;
  fs.train = draw(bundle.train, "train");
  fs.valid = draw(bundle.valid, "valid");
  return fs;
}

// ---------------------------------------------------------------------------
// Manifests: one patient id per line.

inline void save_id_list(const Corpus& patients, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& p : patients) os << p.patient_id << '\n';
}

inline Corpus load_id_list(const std::filesystem::path& path, const Corpus& cohort) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::unordered_map<std::string, const Patient*> index;
  for (const auto& p : cohort) index.emplace(p.patient_id, &p);
  Corpus out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto it = index.find(line);
    if (it == index.end()) throw ParseError("unknown patient id '" + line + "' in " + path.string(), line_no);
    out.push_back(*it->second);
  }
  return out;
}

inline void save_bundle_manifest(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto splits = bundle.splits();
  for (std::size_t s = 0; s < 4; ++s) save_id_list(*splits[s], dir / (std::string(kSplitNames[s]) + ".txt"));
  std::ofstream(dir / "seed.txt", std::ios::binary) << bundle.seed << '\n';
}

inline DatasetBundle load_bundle_manifest(const std::filesystem::path& dir, const Corpus& cohort) {
  DatasetBundle bundle;
  auto splits = bundle.splits();
  for (std::size_t s = 0; s < 4; ++s) *splits[s] = load_id_list(dir / (std::string(kSplitNames[s]) + ".txt"), cohort);
  std::ifstream seed_file(dir / "seed.txt");
  if (!(seed_file >> bundle.seed)) throw IoError("missing or malformed " + (dir / "seed.txt").string());
  return bundle;
}

}  // namespace promptrisk
