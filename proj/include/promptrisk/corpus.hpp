#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "promptrisk/common.hpp"

namespace promptrisk {

struct Note {
  std::string note_id;
  OptionalDate date;
  std::string text;

  bool operator==(const Note&) const = default;
};

struct Patient {
  std::string patient_id;
  int birth_year = 0;
  OptionalDate diagnosis_date;
  std::vector<Note> notes;

  bool positive() const { return diagnosis_date.has_value(); }
  int label() const { return positive() ? 1 : 0; }

  bool operator==(const Patient&) const = default;
};

using Corpus = std::vector<Patient>;

// Dated notes first in ascending date order, undated notes last; stable.
inline void sort_notes(Patient& p) {
  std::stable_sort(p.notes.begin(), p.notes.end(), [](const Note& a, const Note& b) {
    if (a.date.has_value() != b.date.has_value()) return a.date.has_value();
    return a.date && *a.date < *b.date;
  });
}

// Integer-valued distribution realised as a rounded log-normal, resampled
// until it falls in [min, max]. `mean` is the mean after rounding and
// truncation; the location parameter is solved for at sampling time.
struct CountDistribution {
  double mean = 30.0;
  int min = 1;
  int max = 284;
  double log_sigma = 0.65;

  void validate(const std::string& field) const {
    if (min < 1) throw ConfigError(field + ".min must be >= 1");
    if (max < min) throw ConfigError(field + ".max must be >= " + field + ".min");
    if (!(mean >= min && mean <= max)) throw ConfigError(field + ".mean must lie in [min, max]");
    if (!(log_sigma > 0.0)) throw ConfigError(field + ".log_sigma must be positive");
  }
};

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

inline double truncated_rounded_mean(double mu, const CountDistribution& d) {
  double mass = 0.0, first = 0.0;
  for (int k = d.min; k <= d.max; ++k) {
    const double lo = k - 0.5 <= 0.0 ? 0.0 : normal_cdf((std::log(k - 0.5) - mu) / d.log_sigma);
    const double hi = normal_cdf((std::log(k + 0.5) - mu) / d.log_sigma);
    mass += hi - lo;
    first += k * (hi - lo);
  }
  return mass > 0.0 ? first / mass : static_cast<double>(d.min);
}

// Bisection on the log-normal location so the truncated mean hits d.mean.
inline double solve_log_location(const CountDistribution& d) {
  double lo = std::log(0.5 * d.min) - 6.0 * d.log_sigma;
  double hi = std::log(d.max + 0.5) + 6.0 * d.log_sigma;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (truncated_rounded_mean(mid, d) < d.mean ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

class CountSampler {
 public:
  explicit CountSampler(const CountDistribution& d)
      : d_(d), lognormal_(solve_log_location(d), d.log_sigma) {}

  int operator()(Rng& rng) {
    for (;;) {
      const double x = std::round(lognormal_(rng));
      if (x >= d_.min && x <= d_.max) return static_cast<int>(x);
    }
  }

 private:
  CountDistribution d_;
  std::lognormal_distribution<double> lognormal_;
};

}  // namespace detail

inline const std::vector<std::string>& clinical_words() {
  static const std::vector<std::string> words = {
      "hoest", "dyspnoe", "hemoptoe", "gewichtsverlies", "vermoeidheid", "koorts",
      "pijn",  "thorax",  "roken",    "longfoto",        "recept",       "controle"};
  return words;
}

// Deterministic synthetic vocabulary: a handful of clinical words followed by
// consonant-vowel pseudo-words. Pseudo-words never collide with the clinical
// list (every clinical word has a vowel or consonant cluster).
inline std::vector<std::string> synthetic_vocabulary(std::size_t size) {
  static constexpr std::string_view consonants = "bdfghklmnprstvwz";
  static constexpr std::string_view vowels = "aeiou";
  const std::size_t n_syll = consonants.size() * vowels.size();
  auto syllable = [&](std::size_t i) {
    return std::string{consonants[i / vowels.size()], vowels[i % vowels.size()]};
  };
  std::vector<std::string> out;
  out.reserve(size);
  for (const auto& w : clinical_words()) {
    if (out.size() == size) return out;
    out.push_back(w);
  }
  for (std::size_t i = 0; out.size() < size; ++i) {
    std::string w = syllable(i % n_syll) + syllable((i / n_syll) % n_syll);
    if (i >= n_syll * n_syll) w += syllable((i / (n_syll * n_syll)) % n_syll);
    out.push_back(std::move(w));
  }
  return out;
}

struct GeneratorConfig {
  std::size_t n_patients = 1000;
  double prevalence = 0.5;
  CountDistribution notes_per_patient{30.0, 1, 284, 0.65};
  CountDistribution tokens_per_note{30.0, 5, 80, 0.4};
  std::size_t vocab_size = 1000;
  std::vector<std::string> signal_tokens = {"hoest", "dyspnoe", "hemoptoe", "gewichtsverlies"};
  double signal_rate = 0.5;
  DateRange collection_period{};
  double undated_fraction = 0.01;
  double underage_fraction = 0.10;
  double zipf_exponent = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_patients == 0) throw ConfigError("n_patients must be positive");
    if (!(prevalence > 0.0 && prevalence < 1.0)) throw ConfigError("prevalence must lie in (0, 1)");
    notes_per_patient.validate("notes_per_patient");
    tokens_per_note.validate("tokens_per_note");
    if (signal_tokens.empty()) throw ConfigError("signal_tokens must be non-empty");
    if (vocab_size <= signal_tokens.size()) throw ConfigError("vocab_size must exceed the number of signal_tokens");
    const auto vocab = synthetic_vocabulary(vocab_size);
    for (const auto& s : signal_tokens)
      if (std::find(vocab.begin(), vocab.end(), s) == vocab.end())
        throw ConfigError("signal_tokens: '" + s + "' is not in the generator vocabulary");
    if (!(signal_rate >= 0.0 && signal_rate <= 1.0)) throw ConfigError("signal_rate must lie in [0, 1]");
    if (!(undated_fraction >= 0.0 && undated_fraction < 1.0)) throw ConfigError("undated_fraction must lie in [0, 1)");
    if (!(underage_fraction >= 0.0 && underage_fraction <= 1.0)) throw ConfigError("underage_fraction must lie in [0, 1]");
    if (!(zipf_exponent > 0.0)) throw ConfigError("zipf_exponent must be positive");
    if (days_between(collection_period.end, collection_period.start) < 1100)
      throw ConfigError("collection_period must span at least 1100 days");
  }
};

// Days before diagnosis during which a positive patient's notes carry signal.
inline constexpr long kSignalWindowMin = 150;
inline constexpr long kSignalWindowMax = 730;

inline Corpus generate(const GeneratorConfig& config) {
  config.validate();
  Rng rng(config.seed);

  const auto vocab = synthetic_vocabulary(config.vocab_size);
  std::vector<std::string> background;
  for (const auto& w : vocab)
    if (std::find(config.signal_tokens.begin(), config.signal_tokens.end(), w) == config.signal_tokens.end())
      background.push_back(w);
  std::vector<double> zipf(background.size());
  for (std::size_t r = 0; r < zipf.size(); ++r) zipf[r] = 1.0 / std::pow(static_cast<double>(r + 1), config.zipf_exponent);
  std::discrete_distribution<std::size_t> word_dist(zipf.begin(), zipf.end());

  detail::CountSampler n_notes(config.notes_per_patient);
  detail::CountSampler n_tokens(config.tokens_per_note);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&](long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng); };

  const auto n_pos = static_cast<std::size_t>(std::llround(config.n_patients * config.prevalence));
  std::vector<char> labels(config.n_patients, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
  std::shuffle(labels.begin(), labels.end(), rng);

  const Date start = config.collection_period.start;
  const Date end = config.collection_period.end;
  const long period_days = days_between(end, start);

  Corpus corpus;
  corpus.reserve(config.n_patients);
  for (std::size_t i = 0; i < config.n_patients; ++i) {
    Patient p;
    char id[16];
    std::snprintf(id, sizeof id, "P%07zu", i + 1);
    p.patient_id = id;
    const bool positive = labels[i] != 0;

    const long span = uniform_int(365, 3650);
    Date first, last;
    if (positive) {
      const Date diagnosis = add_days(start, uniform_int(kSignalWindowMax + 30, period_days));
      p.diagnosis_date = diagnosis;
      last = std::min(end, add_days(diagnosis, uniform_int(0, 365)));
      first = std::max(start, add_days(diagnosis, -span));
    } else {
      last = add_days(start, uniform_int(kSignalWindowMax, period_days));
      first = std::max(start, add_days(last, -span));
    }

    const int count = n_notes(rng);
    std::vector<OptionalDate> dates(static_cast<std::size_t>(count));
    const long history = days_between(last, first);
    for (auto& d : dates) d = add_days(first, uniform_int(0, history));
    if (!positive) dates[0] = last;
    for (auto& d : dates)
      if (unit(rng) < config.undated_fraction) d.reset();

    auto in_window = [&](const OptionalDate& d) {
      if (!d || !p.diagnosis_date) return false;
      const long before = days_between(*p.diagnosis_date, *d);
      return before >= kSignalWindowMin && before <= kSignalWindowMax;
    };
    if (positive && std::none_of(dates.begin(), dates.end(), in_window))
      dates[0] = add_days(*p.diagnosis_date, -uniform_int(kSignalWindowMin, kSignalWindowMax));

    const Date last_dated = std::max_element(dates.begin(), dates.end(), [](const OptionalDate& a, const OptionalDate& b) {
                              return a.value_or(Date{}) < b.value_or(Date{});
                            })->value_or(last);
    const int age = unit(rng) < config.underage_fraction ? static_cast<int>(uniform_int(25, 39))
                                                           : static_cast<int>(uniform_int(40, 90));
    p.birth_year = year_of(last_dated) - age;

    for (auto& d : dates) {
      Note note;
      note.date = d;
      const int len = n_tokens(rng);
      std::vector<std::string> words(static_cast<std::size_t>(len));
      for (auto& w : words) w = background[word_dist(rng)];
      if (positive && in_window(d) && unit(rng) < config.signal_rate) {
        const int injected = 1 + (unit(rng) < 0.5 ? 1 : 0);
        for (int s = 0; s < injected; ++s) {
          const auto pos = static_cast<std::size_t>(uniform_int(0, len - 1));
          words[pos] = config.signal_tokens[static_cast<std::size_t>(
              uniform_int(0, static_cast<long>(config.signal_tokens.size()) - 1))];
        }
      }
      for (std::size_t w = 0; w < words.size(); ++w) {
        if (w) note.text += ' ';
        note.text += words[w];
      }
      p.notes.push_back(std::move(note));
    }
    sort_notes(p);
    for (std::size_t n = 0; n < p.notes.size(); ++n) {
      char nid[16];
      std::snprintf(nid, sizeof nid, "-N%04zu", n + 1);
      p.notes[n].note_id = p.patient_id + nid;
    }
    corpus.push_back(std::move(p));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Line-delimited corpus files: one JSON object per patient per line.

inline std::string serialize_patient(const Patient& p) {
  nlohmann::json notes = nlohmann::json::array();
  for (const auto& n : p.notes)
    notes.push_back({{"note_id", n.note_id}, {"date", to_iso(n.date)}, {"text", n.text}});
  const nlohmann::json j = {{"patient_id", p.patient_id},
                            {"birth_year", p.birth_year},
                            {"diagnosis_date", to_iso(p.diagnosis_date)},
                            {"notes", std::move(notes)}};
  return j.dump();
}

inline Patient parse_patient(const std::string& line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
  }
  auto field = [&](const nlohmann::json& obj, const char* key, auto check, const char* kind) -> const nlohmann::json& {
    if (!obj.is_object() || !obj.contains(key) || !check(obj.at(key)))
      throw ParseError(std::string("field '") + key + "' missing or not " + kind, line_no);
    return obj.at(key);
  };
  auto is_str = [](const nlohmann::json& v) { return v.is_string(); };
  auto is_int = [](const nlohmann::json& v) { return v.is_number_integer(); };
  auto is_arr = [](const nlohmann::json& v) { return v.is_array(); };
  auto date_field = [&](const nlohmann::json& obj, const char* key) -> OptionalDate {
    const auto s = field(obj, key, is_str, "a string").template get<std::string>();
    if (s == kAbsent) return std::nullopt;
    auto d = parse_iso(s);
    if (!d) throw ParseError(std::string("field '") + key + "' is not an ISO-8601 date or ABSENT: " + s, line_no);
    return d;
  };

  Patient p;
  p.patient_id = field(j, "patient_id", is_str, "a string").get<std::string>();
  p.birth_year = field(j, "birth_year", is_int, "an integer").get<int>();
  p.diagnosis_date = date_field(j, "diagnosis_date");
  for (const auto& n : field(j, "notes", is_arr, "an array")) {
    Note note;
    note.note_id = field(n, "note_id", is_str, "a string").get<std::string>();
    note.date = date_field(n, "date");
    note.text = field(n, "text", is_str, "a string").get<std::string>();
    p.notes.push_back(std::move(note));
  }
  return p;
}

inline void write_corpus(std::ostream& os, const Corpus& corpus) {
  for (const auto& p : corpus) os << serialize_patient(p) << '\n';
}

inline Corpus read_corpus(std::istream& is) {
  Corpus out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    out.push_back(parse_patient(line, line_no));
  }
  return out;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write corpus file " + path);
  write_corpus(os, corpus);
  if (!os) throw IoError("failed writing corpus file " + path);
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read corpus file " + path);
  return read_corpus(is);
}

inline std::uint64_t corpus_hash(const Corpus& corpus) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : corpus) {
    h = fnv1a(serialize_patient(p), h);
    h = fnv1a("\n", h);
  }
  return h;
}

}  // namespace promptrisk
