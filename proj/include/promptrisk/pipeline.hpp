#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "promptrisk/run_config.hpp"
#include "promptrisk/text.hpp"

namespace promptrisk::pipeline {

namespace fs = std::filesystem;

// An upstream artifact is absent. The message names the command producing it.
class MissingInputError : public Error {
 public:
  using Error::Error;
};

inline const std::vector<std::string>& model_names() {
  static const std::vector<std::string> names = {"ft", "st", "wem"};
  return names;
}

// ---------------------------------------------------------------------------
// Artifacts

// Artifacts are named by their path relative to the output directory.
// "corpus.jsonl" and "checkpoints/..." may be relocated by `paths`.
class Layout {
 public:
  explicit Layout(const Paths& p)
      : out_(p.out),
        corpus_(p.corpus.empty() ? out_ / "corpus.jsonl" : fs::path(p.corpus)),
        checkpoints_(p.checkpoints.empty() ? out_ / "checkpoints" : fs::path(p.checkpoints)) {}

  const fs::path& out() const { return out_; }

  fs::path path(const std::string& key) const {
    if (key == "corpus.jsonl") return corpus_;
    const std::string ck = "checkpoints/";
    if (key.rfind(ck, 0) == 0) return checkpoints_ / key.substr(ck.size());
    return out_ / key;
  }

 private:
  fs::path out_, corpus_, checkpoints_;
};

namespace key {
inline const std::string corpus = "corpus.jsonl";
inline const std::string cohort = "cohort.jsonl";
inline const std::string vocab = "vocab.tsv";
inline const std::string datasets = "datasets.csv";
inline const std::string backbone = "checkpoints/backbone.ckpt";
inline const std::string wem_pretrained = "checkpoints/wem_pretrained.ckpt";
inline const std::string fewshot_csv = "fewshot.csv";
inline const std::string report_csv = "report.csv";

inline std::string split(const char* name) { return std::string("splits/balanced/") + name + ".txt"; }
inline std::string split_seed() { return "splits/balanced/seed.txt"; }
inline std::string imbalanced(std::size_t r) { return "splits/imbalanced_1to" + std::to_string(r) + ".txt"; }
inline std::string fewshot(std::size_t k, const char* split) {
  return "splits/fewshot/k" + std::to_string(k) + "_" + split + ".txt";
}
inline std::string model(const std::string& m) { return "checkpoints/" + m + ".ckpt"; }
inline std::string eval_csv(const std::string& sel) { return "eval_" + sel + ".csv"; }
inline std::string imbalance_csv(const std::string& sel) { return "imbalance_" + sel + ".csv"; }
inline std::string manifest(const std::string& run) { return "manifests/" + run + ".json"; }
}  // namespace key

inline std::string producer_of(const std::string& k) {
  if (k == key::corpus) return "gen-corpus";
  if (k == key::backbone || k == key::wem_pretrained) return "pretrain";
  for (const auto& m : model_names()) {
    if (k == key::model(m)) return "train " + m;
    if (k == key::eval_csv(m)) return "evaluate --model " + m;
  }
  if (k.rfind("eval_", 0) == 0) return "evaluate";
  if (k.rfind("manifests/", 0) == 0) return "any pipeline command";
  return "build-cohort";
}

inline std::string hash_bytes(std::string_view bytes) { return hex64(fnv1a(bytes)); }

inline void write_text(const fs::path& p, std::string_view bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  nc::write_file(p.string(), bytes);
}

// ---------------------------------------------------------------------------
// Invocation

struct Invocation {
  std::string command;    // gen-corpus | build-cohort | pretrain | train | evaluate | sweep-imbalance | sweep-fewshot | report
  std::string selection;  // model for train; ft|st|wem|all for evaluate and sweep-imbalance

  std::string run_name() const { return selection.empty() ? command : command + "-" + selection; }
};

struct Options {
  bool parallel = false;
  std::ostream* log = &std::cerr;
};

// Runs f(i) for i in [0, n); threads only when `parallel`. Each index writes
// its own slot, so results do not depend on scheduling.
template <class F>
void for_each_index(std::size_t n, bool parallel, F&& f) {
  const std::size_t threads = parallel ? std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency())) : 1;
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Run context: config, locations and lazily loaded upstream artifacts.

using NotePredictor = std::function<double(std::string_view)>;

class Context {
 public:
  Context(const RunConfig& cfg, const Options& opt)
      : cfg_(cfg), layout_(cfg.paths), hash_(config_hash(cfg)), opt_(opt) {}

  const RunConfig& cfg() const { return cfg_; }
  const Layout& layout() const { return layout_; }
  const std::string& hash() const { return hash_; }
  bool parallel() const { return opt_.parallel; }
  std::ostream& log() const { return *opt_.log; }
  std::uint64_t seed(std::string_view tag) const { return derive_seed(cfg_.seed, tag); }
  std::string path(const std::string& k) const { return layout_.path(k).string(); }

  const Corpus& cohort() {
    if (!cohort_) cohort_ = load_corpus(path(key::cohort));
    return *cohort_;
  }
  const DatasetBundle& bundle() {
    if (!bundle_) bundle_ = load_bundle_manifest(layout_.path(key::split("train")).parent_path(), cohort());
    return *bundle_;
  }
  const Vocabulary& vocab() {
    if (!vocab_) vocab_ = text::load_vocab(path(key::vocab));
    return *vocab_;
  }
  const encoder::Backbone& backbone() {
    if (!backbone_) backbone_ = encoder::Backbone::from_checkpoint(nc::load_checkpoint(path(key::backbone)));
    return *backbone_;
  }
  wem::WemModel pretrained_wem() { return wem::WemModel::from_checkpoint(nc::load_checkpoint(path(key::wem_pretrained)), vocab()); }

  // Predictor for a trained model; the context owns the loaded weights.
  NotePredictor predictor(const std::string& model) {
    const auto ck = nc::load_checkpoint(path(key::model(model)));
    if (model == "ft") {
      auto m = std::make_shared<encoder::FineTunedClassifier>(encoder::FineTunedClassifier::from_checkpoint(ck));
      keep_.push_back(m);
      const Vocabulary* v = &vocab();
      return [m, v](std::string_view note) { return encoder::predict_note(*m, *v, note); };
    }
    if (model == "st") {
      const auto* bb = &backbone();
      auto a = std::make_shared<encoder::PromptAdapter>(encoder::PromptAdapter::from_checkpoint(ck, *bb));
      keep_.push_back(a);
      const Vocabulary* v = &vocab();
      return [a, bb, v](std::string_view note) { return encoder::predict_note(*bb, *a, *v, note); };
    }
    if (model == "wem") {
      auto m = std::make_shared<wem::WemModel>(wem::WemModel::from_checkpoint(ck, vocab()));
      keep_.push_back(m);
      return [m](std::string_view note) { return m->predict_note(note); };
    }
    throw ConfigError("unknown model '" + model + "' (expected ft, st or wem)");
  }

  // Checkpoint bytes with provenance added to the metadata.
  std::string stamp(const std::string& bytes) const {
    auto ck = nc::deserialize_checkpoint(bytes);
    ck.meta["config_hash"] = hash_;
    ck.meta["seed"] = std::to_string(cfg_.seed);
    return nc::serialize_checkpoint(ck.store, ck.meta);
  }

 private:
  const RunConfig& cfg_;
  Layout layout_;
  std::string hash_;
  Options opt_;
  std::optional<Corpus> cohort_;
  std::optional<DatasetBundle> bundle_;
  std::optional<Vocabulary> vocab_;
  std::optional<encoder::Backbone> backbone_;
  std::vector<std::shared_ptr<void>> keep_;
};

inline eval::PredictionSet predict_all(const NotePredictor& f, const Corpus& patients, bool parallel) {
  struct Ref {
    const Patient* p;
    const Note* n;
  };
  std::vector<Ref> refs;
  for (const auto& p : patients)
    for (const auto& n : p.notes) refs.push_back({&p, &n});
  std::vector<double> probs(refs.size());
  for_each_index(refs.size(), parallel, [&](std::size_t i) { probs[i] = f(refs[i].n->text); });
  eval::PredictionSet out;
  out.reserve(refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i)
    out.push_back({refs[i].p->patient_id, refs[i].n->note_id, probs[i], refs[i].p->label()});
  return out;
}

// ---------------------------------------------------------------------------
// Serialization helpers

inline json report_json(const TrainReport& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_score", e.valid_score}});
  return {{"epochs", epochs},
          {"best_epoch", r.best_epoch},
          {"best_valid_score", r.best_valid_score},
          {"selection_metric", r.selection_metric}};
}

inline std::string provenance_cols(const Context& ctx) { return ctx.hash() + "," + std::to_string(ctx.cfg().seed); }

inline std::string dataset_row(const std::string& dataset, const std::string& split, const Corpus& c,
                               const Context& ctx) {
  const auto n = class_counts(c);
  std::size_t notes = 0;
  for (const auto& p : c) notes += p.notes.size();
  return dataset + "," + split + "," + std::to_string(n.positive) + "," + std::to_string(n.negative) + "," +
         std::to_string(notes) + "," + provenance_cols(ctx) + "\n";
}

inline std::uint64_t fewshot_seed(const Context& ctx, std::size_t replicate) {
  return ctx.seed("fewshot.r" + std::to_string(replicate));
}

inline std::vector<std::vector<TokenId>> token_ids(const Corpus& patients, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<std::vector<TokenId>> out;
  for (auto& n : encoder::label_notes(patients, vocab, max_len)) out.push_back(std::move(n.ids));
  return out;
}

inline std::vector<std::string> note_texts(const Corpus& patients) {
  std::vector<std::string> out;
  for (const auto& p : patients)
    for (const auto& n : p.notes) out.push_back(n.text);
  return out;
}

// Trained predictor plus its training report, for in-memory use by sweeps.
struct Trained {
  NotePredictor predict;
  TrainReport report;
};

inline Trained train_model(Context& ctx, const std::string& model, const Corpus& train, const Corpus& valid,
                           std::uint64_t seed) {
  const auto& cfg = ctx.cfg();
  if (model == "ft") {
    auto sched = cfg.finetune;
    sched.seed = seed;
    auto res = encoder::finetune(ctx.backbone(), train, valid, ctx.vocab(), sched);
    auto m = std::make_shared<encoder::FineTunedClassifier>(std::move(res.model));
    const Vocabulary* v = &ctx.vocab();
    return {[m, v](std::string_view note) { return encoder::predict_note(*m, *v, note); }, std::move(res.report)};
  }
  if (model == "st") {
    auto sched = cfg.prompt.schedule;
    sched.seed = seed;
    const auto* bb = &ctx.backbone();
    auto res = encoder::soft_prompt_tune(*bb, train, valid, ctx.vocab(), cfg.prompt.n_prompts, sched);
    auto a = std::make_shared<encoder::PromptAdapter>(std::move(res.adapter));
    const Vocabulary* v = &ctx.vocab();
    return {[a, bb, v](std::string_view note) { return encoder::predict_note(*bb, *a, *v, note); },
            std::move(res.report)};
  }
  if (model == "wem") {
    auto m = std::make_shared<wem::WemModel>(ctx.pretrained_wem());
    auto sched = cfg.wem.classifier;
    sched.seed = seed;
    auto rep = wem::train_classifier(*m, train, valid, sched);
    return {[m](std::string_view note) { return m->predict_note(note); }, std::move(rep)};
  }
  throw ConfigError("unknown model '" + model + "' (expected ft, st or wem)");
}

// ---------------------------------------------------------------------------
// Commands

struct Plan {
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;  // manifest excluded; it is always written last
  std::function<json(Context&)> run;  // returns the manifest summary
};

inline std::vector<std::string> split_keys() {
  std::vector<std::string> k;
  for (const char* s : kSplitNames) k.push_back(key::split(s));
  k.push_back(key::split_seed());
  return k;
}

inline std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline std::vector<std::string> selected_models(const std::string& sel) {
  if (sel == "all") return model_names();
  if (std::find(model_names().begin(), model_names().end(), sel) == model_names().end())
    throw ConfigError("unknown model '" + sel + "' (expected ft, st, wem or all)");
  return {sel};
}

// Inputs needed to load the given trained models.
inline std::vector<std::string> model_inputs(const std::vector<std::string>& models) {
  auto in = with({key::cohort, key::vocab}, split_keys());
  bool need_backbone = false;
  for (const auto& m : models) {
    in.push_back(key::model(m));
    need_backbone |= m == "st";
  }
  if (need_backbone) in.push_back(key::backbone);
  return in;
}

inline Plan plan_gen_corpus(const Context&) {
  return {{}, {key::corpus}, [](Context& ctx) {
            auto g = ctx.cfg().generator;
            g.seed = ctx.seed("generator");
            const auto corpus = generate(g);
            std::ostringstream os;
            write_corpus(os, corpus);
            write_text(ctx.layout().path(key::corpus), os.str());
            std::size_t notes = 0;
            for (const auto& p : corpus) notes += p.notes.size();
            return json{{"patients", corpus.size()}, {"positives", class_counts(corpus).positive}, {"notes", notes}};
          }};
}

inline Plan plan_build_cohort(const Context& ctx0) {
  const auto& cfg = ctx0.cfg();
  auto outputs = with({key::cohort, key::vocab, key::datasets}, split_keys());
  for (auto r : cfg.split.imbalance_ratios) outputs.push_back(key::imbalanced(r));
  for (auto k : cfg.split.fewshot_sizes) outputs.push_back(key::fewshot(k, "train")), outputs.push_back(key::fewshot(k, "valid"));
  return {{key::corpus}, outputs, [](Context& ctx) {
            const auto& cfg = ctx.cfg();
            const auto& L = ctx.layout();
            const auto corpus = load_corpus(ctx.path(key::corpus));
            const auto cohort = build_cohort(corpus, cfg.cohort);
            std::ostringstream os;
            write_corpus(os, cohort);
            write_text(L.path(key::cohort), os.str());

            const auto bundle = build_balanced(cohort, SplitSpec{cfg.split.fractions, ctx.seed("split")});
            save_bundle_manifest(bundle, L.path(key::split("train")).parent_path());
            std::string table = "dataset,split,n_pos,n_neg,n_notes,config_hash,seed\n";
            table += dataset_row("cohort", "all", cohort, ctx);
            for (std::size_t s = 0; s < 4; ++s) table += dataset_row("balanced", kSplitNames[s], *bundle.splits()[s], ctx);
            for (auto r : cfg.split.imbalance_ratios) {
              const auto test = build_imbalanced_test(cohort, bundle, r);
              fs::create_directories(L.path(key::imbalanced(r)).parent_path());
              save_id_list(test, L.path(key::imbalanced(r)));
              table += dataset_row("imbalanced_1to" + std::to_string(r), "test_2", test, ctx);
            }
            for (auto k : cfg.split.fewshot_sizes) {
              const auto fsset = build_fewshot(bundle, k, fewshot_seed(ctx, 0));
              fs::create_directories(L.path(key::fewshot(k, "train")).parent_path());
              save_id_list(fsset.train, L.path(key::fewshot(k, "train")));
              save_id_list(fsset.valid, L.path(key::fewshot(k, "valid")));
              table += dataset_row("fewshot_k" + std::to_string(k), "train", fsset.train, ctx);
              table += dataset_row("fewshot_k" + std::to_string(k), "valid", fsset.valid, ctx);
            }
            write_text(L.path(key::datasets), table);

            // The vocabulary sees only training text.
            const auto vocab = text::build_vocab(bundle.train, cfg.text.vocab_size);
            text::save_vocab(vocab, ctx.path(key::vocab));
            const auto n = class_counts(cohort);
            return json{{"cohort_positive", n.positive}, {"cohort_negative", n.negative}, {"vocab_size", vocab.size()}};
          }};
}

inline Plan plan_pretrain(const Context&) {
  return {with({key::cohort, key::vocab}, split_keys()), {key::backbone, key::wem_pretrained}, [](Context& ctx) {
            const auto& cfg = ctx.cfg();
            const auto& train = ctx.bundle().train;
            auto ec = cfg.encoder;
            ec.vocab_size = ctx.vocab().size();
            encoder::Backbone bb(ec, ctx.seed("backbone.init"));
            auto mlm = cfg.mlm;
            mlm.seed = ctx.seed("mlm");
            ctx.log() << "pretrain: masked-LM, " << mlm.steps << " steps\n";
            const auto mrep = encoder::pretrain_mlm(bb, token_ids(train, ctx.vocab(), ec.max_len), mlm);
            write_text(ctx.layout().path(key::backbone), ctx.stamp(bb.serialize()));

            wem::WemModel wm(ctx.vocab(), cfg.wem.model, ctx.seed("wem.init"));
            auto sg = cfg.wem.skipgram;
            sg.seed = ctx.seed("wem.skipgram");
            ctx.log() << "pretrain: skip-gram, " << sg.epochs << " epochs\n";
            const auto srep = wem::pretrain_embeddings(wm, note_texts(train), sg);
            write_text(ctx.layout().path(key::wem_pretrained), ctx.stamp(wm.serialize()));
            return json{{"mlm",
                         {{"initial_loss", mrep.initial_loss},
                          {"final_loss", mrep.final_loss},
                          {"steps", mrep.steps},
                          {"train_notes", mrep.train_notes},
                          {"heldout_notes", mrep.heldout_notes}}},
                        {"skipgram",
                         {{"initial_objective", srep.initial_objective},
                          {"final_objective", srep.final_objective},
                          {"pairs_trained", srep.pairs_trained}}}};
          }};
}

inline Plan plan_train(const Context&, const std::string& model) {
  selected_models(model);
  if (model == "all") throw ConfigError("train takes one model: ft, st or wem");
  auto in = with({key::cohort, key::vocab}, split_keys());
  in.push_back(model == "wem" ? key::wem_pretrained : key::backbone);
  return {in, {key::model(model)}, [model](Context& ctx) {
            const auto& cfg = ctx.cfg();
            const auto& b = ctx.bundle();
            const auto seed = ctx.seed("train." + model);
            ctx.log() << "train " << model << ": " << b.train.size() << " patients\n";
            std::string bytes;
            TrainReport rep;
            if (model == "ft") {
              auto sched = cfg.finetune;
              sched.seed = seed;
              auto res = encoder::finetune(ctx.backbone(), b.train, b.valid, ctx.vocab(), sched);
              bytes = res.model.serialize();
              rep = std::move(res.report);
            } else if (model == "st") {
              auto sched = cfg.prompt.schedule;
              sched.seed = seed;
              auto res = encoder::soft_prompt_tune(ctx.backbone(), b.train, b.valid, ctx.vocab(), cfg.prompt.n_prompts, sched);
              bytes = res.adapter.serialize();
              rep = std::move(res.report);
            } else {
              auto m = ctx.pretrained_wem();
              auto sched = cfg.wem.classifier;
              sched.seed = seed;
              rep = wem::train_classifier(m, b.train, b.valid, sched);
              bytes = m.serialize();
            }
            write_text(ctx.layout().path(key::model(model)), ctx.stamp(bytes));
            return report_json(rep);
          }};
}

inline Plan plan_evaluate(const Context&, const std::string& sel) {
  const auto models = selected_models(sel);
  return {model_inputs(models), {key::eval_csv(sel)}, [models, sel](Context& ctx) {
            const auto rule = eval::AggregationRule::parse(ctx.cfg().eval.rule);
            std::ostringstream os;
            os << eval::kMetricCsvHeader << '\n';
            json summary = json::object();
            for (const auto& m : models) {
              const auto preds = predict_all(ctx.predictor(m), ctx.bundle().test_1, ctx.parallel());
              const auto rep = eval::evaluate(preds, rule);
              for (const auto& row : eval::report_rows(m, "test_1", rep))
                eval::write_metric_row(os, row, ctx.hash(), ctx.cfg().seed);
              summary[m] = {{"note_auroc", rep.note.auroc}, {"patient_auroc", rep.patient.auroc}};
            }
            write_text(ctx.layout().path(key::eval_csv(sel)), os.str());
            return summary;
          }};
}

inline constexpr const char* kImbalanceCsvHeader =
    "model,test_set,ratio,level,rule,auroc,auprc,brier_x100,brier_comparable,n_pos,n_neg,config_hash,seed";

inline Plan plan_sweep_imbalance(const Context& ctx0, const std::string& sel) {
  const auto models = selected_models(sel);
  auto in = model_inputs(models);
  for (auto r : ctx0.cfg().split.imbalance_ratios) in.push_back(key::imbalanced(r));
  return {in, {key::imbalance_csv(sel)}, [models, sel](Context& ctx) {
            const auto& cfg = ctx.cfg();
            const auto rule = eval::AggregationRule::parse(cfg.eval.rule);
            // Balanced test_2 first, then each imbalanced set.
            std::vector<std::pair<std::string, std::size_t>> sets = {{"bal", 1}};
            std::vector<Corpus> corpora = {ctx.bundle().test_2};
            for (auto r : cfg.split.imbalance_ratios) {
              sets.push_back({"1:" + std::to_string(r), r});
              corpora.push_back(load_id_list(ctx.layout().path(key::imbalanced(r)), ctx.cohort()));
            }
            // Predict each distinct patient once; larger sets contain the smaller ones.
            Corpus distinct;
            std::unordered_map<std::string, std::size_t> seen;
            for (const auto& c : corpora)
              for (const auto& p : c)
                if (seen.emplace(p.patient_id, distinct.size()).second) distinct.push_back(p);

            std::ostringstream os;
            os << kImbalanceCsvHeader << '\n';
            auto row = [&](const std::string& model, std::size_t s, const char* level, bool comparable,
                           const eval::LevelMetrics& m) {
              os << model << ',' << sets[s].first << ',' << sets[s].second << ',' << level << ',' << rule.name() << ','
                 << eval::format_fixed(m.auroc) << ',' << eval::format_fixed(m.auprc) << ','
                 << eval::format_fixed(100.0 * m.brier) << ',' << (comparable ? 1 : 0) << ',' << m.n_pos << ',' << m.n_neg << ',' << provenance_cols(ctx) << '\n';
            };
            // Uniform random scores: AUROC 1/2, AUPRC equal to prevalence. Their
            // Brier of 1/3 says nothing about calibration, hence not comparable.
            for (std::size_t s = 0; s < sets.size(); ++s) {
              const auto n = class_counts(corpora[s]);
              row("random", s, "patient", false, eval::random_baseline(n.positive, n.negative));
            }
            json summary = json::object();
            for (const auto& m : models) {
              ctx.log() << "sweep-imbalance " << m << ": predicting " << distinct.size() << " patients\n";
              const auto all = predict_all(ctx.predictor(m), distinct, ctx.parallel());
              std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> range;  // patient -> [begin, end)
              for (std::size_t i = 0; i < all.size(); ++i) {
                auto [it, fresh] = range.emplace(all[i].patient_id, std::make_pair(i, i + 1));
                if (!fresh) it->second.second = i + 1;
              }
              std::vector<eval::MetricReport> reps;
              for (const auto& c : corpora) {
                eval::PredictionSet preds;
                for (const auto& p : c) {
                  auto it = range.find(p.patient_id);
                  if (it == range.end()) continue;  // patient without notes
                  preds.insert(preds.end(), all.begin() + static_cast<std::ptrdiff_t>(it->second.first),
                               all.begin() + static_cast<std::ptrdiff_t>(it->second.second));
                }
                reps.push_back(eval::evaluate(preds, rule));
              }
              for (const char* level : {"note", "patient"})
                for (std::size_t s = 0; s < sets.size(); ++s) {
                  const auto& lm = std::string(level) == "note" ? reps[s].note : reps[s].patient;
                  row(m, s, level, true, lm);
                }
              json per = json::array();
              for (std::size_t s = 0; s < sets.size(); ++s)
                per.push_back({{"test_set", sets[s].first}, {"patient_auprc", reps[s].patient.auprc},
                               {"patient_brier", reps[s].patient.brier}});
              summary[m] = per;
            }
            write_text(ctx.layout().path(key::imbalance_csv(sel)), os.str());
            return summary;
          }};
}

inline constexpr const char* kFewshotCsvHeader = "k,replicate,model,regime,level,rule,auroc,auprc,config_hash,seed";

// (model, regime) cells of the few-shot figure, in output order.
inline const std::vector<std::pair<std::string, std::string>>& fewshot_regimes() {
  static const std::vector<std::pair<std::string, std::string>> r = {{"encoder", "ft"}, {"encoder", "st"}, {"wem", "ft"}};
  return r;
}

inline Plan plan_sweep_fewshot(const Context&, std::size_t replicates) {
  auto in = with({key::cohort, key::vocab, key::backbone, key::wem_pretrained}, split_keys());
  return {in, {key::fewshot_csv}, [replicates](Context& ctx) {
            const auto& cfg = ctx.cfg();
            const auto rule = eval::AggregationRule::parse(cfg.eval.rule);
            const auto& b = ctx.bundle();
            ctx.backbone();
            ctx.vocab();
            struct Cell {
              std::size_t k, replicate;
              std::string model, regime;
              double auroc = 0, auprc = 0;
              std::size_t best_epoch = 0;
            };
            std::vector<Cell> cells;
            for (std::size_t r = 0; r < replicates; ++r)
              for (auto k : cfg.split.fewshot_sizes)
                for (const auto& [model, regime] : fewshot_regimes()) cells.push_back({k, r, model, regime});
            // Draw every set up front so infeasible sizes fail before any training.
            std::map<std::pair<std::size_t, std::size_t>, FewShotSet> sets;
            for (std::size_t r = 0; r < replicates; ++r)
              for (auto k : cfg.split.fewshot_sizes) sets.emplace(std::make_pair(k, r), build_fewshot(b, k, fewshot_seed(ctx, r)));
            std::mutex log_mu;
            for_each_index(cells.size(), ctx.parallel(), [&](std::size_t i) {
              auto& c = cells[i];
              const auto& fsset = sets.at({c.k, c.replicate});
              const std::string trainer = c.model == "wem" ? "wem" : c.regime;
              const auto tag = "fewshot.k" + std::to_string(c.k) + ".r" + std::to_string(c.replicate) + "." + trainer;
              auto t = train_model(ctx, trainer, fsset.train, fsset.valid, ctx.seed(tag));
              const auto rep = eval::evaluate(predict_all(t.predict, b.test_1, false), rule);
              c.auroc = rep.patient.auroc;
              c.auprc = rep.patient.auprc;
              c.best_epoch = t.report.best_epoch;
              std::lock_guard lock(log_mu);
              ctx.log() << "sweep-fewshot k=" << c.k << " r=" << c.replicate << ' ' << c.model << '/' << c.regime
                        << ": auroc " << eval::format_fixed(c.auroc, 4) << '\n';
            });
            std::ostringstream os;
            os << kFewshotCsvHeader << '\n';
            json summary = json::array();
            for (const auto& c : cells) {
              os << c.k << ',' << c.replicate << ',' << c.model << ',' << c.regime << ",patient," << rule.name() << ','
                 << eval::format_fixed(c.auroc) << ',' << eval::format_fixed(c.auprc) << ',' << provenance_cols(ctx)
                 << '\n';
              summary.push_back({{"k", c.k}, {"replicate", c.replicate}, {"model", c.model}, {"regime", c.regime},
                                 {"best_epoch", c.best_epoch}});
            }
            write_text(ctx.layout().path(key::fewshot_csv), os.str());
            return summary;
          }};
}

inline std::vector<std::string> list_manifests(const Layout& L, const std::string& skip) {
  std::vector<std::string> out;
  const auto dir = L.out() / "manifests";
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.path().extension() == ".json" && name != skip + ".json") out.push_back("manifests/" + name);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
  return f;
}

inline Plan plan_report(const Context& ctx0) {
  auto in = list_manifests(ctx0.layout(), "report");
  if (std::none_of(in.begin(), in.end(), [](const std::string& m) { return m.rfind("manifests/evaluate-", 0) == 0; }))
    in.push_back(key::manifest("evaluate-all"));  // reported as missing
  for (const auto& m : std::vector<std::string>(in))
    if (m.rfind("manifests/evaluate-", 0) == 0) in.push_back(key::eval_csv(m.substr(19, m.size() - 24)));
  return {in, {key::report_csv}, [in](Context& ctx) {
            std::map<std::string, json> manifests;
            for (const auto& k : in) {
              if (k.rfind("manifests/", 0) != 0) continue;
              const auto j = json::parse(nc::read_file(ctx.path(k)));
              if (j.value("config_hash", "") != ctx.hash() || j.value("seed", std::uint64_t{0}) != ctx.cfg().seed)
                throw VerificationError(k + " was produced by config " + j.value("config_hash", "?") + " seed " +
                                        std::to_string(j.value("seed", std::uint64_t{0})) + "; this run is config " +
                                        ctx.hash() + " seed " + std::to_string(ctx.cfg().seed));
              manifests[j.value("run", k)] = j;
            }
            // Test metrics joined with the training record of the same model.
            std::ostringstream os;
            os << "model,split,level,rule,auroc,auprc,brier_x100,n_pos,n_neg,best_epoch,best_valid_score,config_hash,seed\n";
            std::set<std::string> done;
            for (const auto& k : in) {
              if (k.rfind("eval_", 0) != 0) continue;
              std::stringstream csv(nc::read_file(ctx.path(k)));
              std::string line;
              std::getline(csv, line);
              while (std::getline(csv, line)) {
                const auto f = split_csv_line(line);
                if (f.size() != 11) throw ParseError("malformed metric row in " + k, 0);
                if (f[9] != ctx.hash()) throw VerificationError(k + " carries config hash " + f[9]);
                if (!done.insert(f[0] + "," + f[1] + "," + f[2]).second) continue;
                std::string best_epoch = "NA", best_score = "NA";
                auto it = manifests.find("train-" + f[0]);
                if (it != manifests.end()) {
                  best_epoch = std::to_string(it->second["summary"]["best_epoch"].get<std::size_t>());
                  best_score = eval::format_fixed(it->second["summary"]["best_valid_score"].get<double>());
                }
                for (std::size_t i = 0; i < 9; ++i) os << f[i] << ',';
                os << best_epoch << ',' << best_score << ',' << f[9] << ',' << f[10] << '\n';
              }
            }
            write_text(ctx.layout().path(key::report_csv), os.str());
            ctx.log() << os.str();
            json runs = json::array();
            for (const auto& [name, j] : manifests) runs.push_back(name);
            return json{{"joined", runs}};
          }};
}

inline Plan make_plan(const Context& ctx, const Invocation& inv, std::size_t replicates) {
  const auto& c = inv.command;
  if (c == "gen-corpus") return plan_gen_corpus(ctx);
  if (c == "build-cohort") return plan_build_cohort(ctx);
  if (c == "pretrain") return plan_pretrain(ctx);
  if (c == "train") return plan_train(ctx, inv.selection);
  if (c == "evaluate") return plan_evaluate(ctx, inv.selection);
  if (c == "sweep-imbalance") return plan_sweep_imbalance(ctx, inv.selection);
  if (c == "sweep-fewshot") return plan_sweep_fewshot(ctx, replicates);
  if (c == "report") return plan_report(ctx);
  throw ConfigError("unknown command '" + c + "'");
}

// ---------------------------------------------------------------------------
// Execution

struct RunResult {
  std::vector<std::string> outputs;  // keys, manifest last
};

inline RunResult run(const RunConfig& cfg, const Invocation& inv, const Options& opt = {}) {
  cfg.validate();
  Context ctx(cfg, opt);
  const std::size_t replicates = cfg.sweep.replicates;
  const Plan plan = make_plan(ctx, inv, replicates);
  for (const auto& k : plan.inputs)
    if (!fs::exists(ctx.layout().path(k)))
      throw MissingInputError("missing input " + ctx.path(k) + "; run `promptrisk " + producer_of(k) + "` first");
  fs::create_directories(ctx.layout().out());

  json summary = plan.run(ctx);

  json manifest = {{"run", inv.run_name()},
                   {"command", inv.command},
                   {"config_hash", ctx.hash()},
                   {"seed", cfg.seed},
                   {"summary", std::move(summary)}};
  if (!inv.selection.empty()) manifest["model"] = inv.selection;
  auto config = to_json(cfg);
  config.erase("paths");
  manifest["config"] = std::move(config);
  json inputs = json::object(), outputs = json::object();
  for (const auto& k : plan.inputs) inputs[k] = hash_bytes(nc::read_file(ctx.path(k)));
  for (const auto& k : plan.outputs) outputs[k] = hash_bytes(nc::read_file(ctx.path(k)));
  manifest["inputs"] = std::move(inputs);
  manifest["outputs"] = std::move(outputs);
  const auto mkey = key::manifest(inv.run_name());
  write_text(ctx.layout().path(mkey), manifest.dump(2) + "\n");

  RunResult res{plan.outputs};
  res.outputs.push_back(mkey);
  return res;
}

// Runs the command, reruns it in a scratch directory seeded with copies of the
// same inputs, and byte-compares every output.
inline RunResult run_verified(const RunConfig& cfg, const Invocation& inv, const Options& opt = {}) {
  const auto first = run(cfg, inv, opt);
  Context ctx(cfg, opt);
  const auto inputs = make_plan(ctx, inv, cfg.sweep.replicates).inputs;

  std::random_device rd;
  const fs::path scratch = fs::temp_directory_path() / ("promptrisk-verify-" + hex64((std::uint64_t{rd()} << 32) | rd()));
  RunConfig shadow = cfg;
  shadow.paths = {scratch.string(), "", ""};
  const Layout there(shadow.paths);
  struct Cleanup {
    fs::path p;
    ~Cleanup() {
      std::error_code ec;
      fs::remove_all(p, ec);
    }
  } cleanup{scratch};
  for (const auto& k : inputs) {
    fs::create_directories(there.path(k).parent_path());
    fs::copy_file(ctx.layout().path(k), there.path(k), fs::copy_options::overwrite_existing);
  }
  *opt.log << "verify: rerunning " << inv.run_name() << " in " << scratch.string() << '\n';
  run(shadow, inv, opt);

  std::vector<std::string> drift;
  for (const auto& k : first.outputs)
    if (nc::read_file(ctx.path(k)) != nc::read_file(there.path(k).string())) drift.push_back(k);
  if (!drift.empty()) {
    std::string msg = "rerun of " + inv.run_name() + " produced different bytes in:";
    for (const auto& k : drift) msg += " " + k;
    throw VerificationError(msg);
  }
  *opt.log << "verify: " << first.outputs.size() << " outputs identical\n";
  return first;
}

}  // namespace promptrisk::pipeline
