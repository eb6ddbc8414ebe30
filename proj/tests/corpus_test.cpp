#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "promptrisk/corpus.hpp"
#include "promptrisk/text.hpp"

namespace promptrisk {
namespace {

GeneratorConfig small_config(std::size_t n, std::uint64_t seed = 7) {
  GeneratorConfig c;
  c.n_patients = n;
  c.seed = seed;
  return c;
}

std::string serialized(const Corpus& c) {
  std::ostringstream os;
  write_corpus(os, c);
  return os.str();
}

bool has_signal(const Note& n, const std::vector<std::string>& signal) {
  for (const auto& t : text::tokenize(n.text))
    if (std::find(signal.begin(), signal.end(), t) != signal.end()) return true;
  return false;
}

TEST(Generate, ExactPositiveCount) {
  const auto corpus = generate(small_config(1000));
  std::size_t pos = 0;
  for (const auto& p : corpus) pos += p.positive();
  EXPECT_EQ(pos, 500u);
  EXPECT_EQ(corpus.size(), 1000u);

  auto c = small_config(333);
  c.prevalence = 0.3;
  pos = 0;
  for (const auto& p : generate(c)) pos += p.positive();
  EXPECT_EQ(pos, 100u);  // round(99.9)
}

TEST(Generate, MeanNotesPerPatientInReportedRange) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto corpus = generate(small_config(1000, seed));
    std::size_t total = 0, mn = SIZE_MAX, mx = 0;
    for (const auto& p : corpus) {
      total += p.notes.size();
      mn = std::min(mn, p.notes.size());
      mx = std::max(mx, p.notes.size());
    }
    const double mean = static_cast<double>(total) / 1000.0;
    EXPECT_GE(mean, 28.1) << "seed " << seed;
    EXPECT_LE(mean, 32.2) << "seed " << seed;
    EXPECT_GE(mn, 1u);
    EXPECT_LE(mx, 284u);
  }
}

TEST(Generate, TokenCountsRespectBounds) {
  const auto corpus = generate(small_config(200));
  for (const auto& p : corpus)
    for (const auto& n : p.notes) {
      const auto toks = text::tokenize(n.text);
      EXPECT_GE(toks.size(), 5u);
      EXPECT_LE(toks.size(), 82u);  // up to two signal tokens on top of the drawn length
      EXPECT_FALSE(n.text.empty());
    }
}

TEST(Generate, DeterministicForSeedAndSensitiveToIt) {
  const auto a = serialized(generate(small_config(300, 11)));
  const auto b = serialized(generate(small_config(300, 11)));
  const auto c = serialized(generate(small_config(300, 12)));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Generate, LabelSignalConsistency) {
  auto cfg = small_config(600);
  cfg.signal_rate = 1.0;
  const auto corpus = generate(cfg);
  std::size_t signalled_positive = 0;
  for (const auto& p : corpus) {
    EXPECT_EQ(p.positive(), p.diagnosis_date.has_value());
    if (!p.positive()) {
      for (const auto& n : p.notes) EXPECT_FALSE(has_signal(n, cfg.signal_tokens)) << n.note_id;
      continue;
    }
    bool in_window = false;
    for (const auto& n : p.notes) {
      if (!n.date) {
        EXPECT_FALSE(has_signal(n, cfg.signal_tokens));
        continue;
      }
      const long before = days_between(*p.diagnosis_date, *n.date);
      const bool w = before >= kSignalWindowMin && before <= kSignalWindowMax;
      in_window = in_window || w;
      // signal_rate = 1: every in-window note carries signal and no other note does
      EXPECT_EQ(has_signal(n, cfg.signal_tokens), w) << n.note_id;
      signalled_positive += w;
    }
    EXPECT_TRUE(in_window) << p.patient_id;
  }
  EXPECT_GT(signalled_positive, 0u);
}

TEST(Generate, DatesInsidePeriodAndNotesOrdered) {
  const auto cfg = small_config(400);
  const auto corpus = generate(cfg);
  std::size_t undated = 0, total = 0;
  for (const auto& p : corpus) {
    bool seen_undated = false;
    OptionalDate prev;
    for (const auto& n : p.notes) {
      ++total;
      if (!n.date) {
        seen_undated = true;
        ++undated;
        continue;
      }
      EXPECT_FALSE(seen_undated) << "dated note after undated one in " << p.patient_id;
      EXPECT_TRUE(cfg.collection_period.contains(*n.date));
      if (prev) {
        EXPECT_LE(*prev, *n.date);
      }
      prev = n.date;
    }
  }
  const double frac = static_cast<double>(undated) / static_cast<double>(total);
  EXPECT_GT(frac, 0.002);
  EXPECT_LT(frac, 0.03);
}

TEST(Generate, RoughlyTenPercentUnderage) {
  const auto corpus = generate(small_config(2000));
  std::size_t young = 0;
  for (const auto& p : corpus) {
    OptionalDate last;
    for (const auto& n : p.notes)
      if (n.date && (!last || *n.date > *last)) last = n.date;
    ASSERT_TRUE(last.has_value());
    young += year_of(*last) - p.birth_year < 40;
  }
  EXPECT_NEAR(static_cast<double>(young) / 2000.0, 0.10, 0.03);
}

TEST(Generate, InvalidConfigNamesField) {
  auto expect_field = [](GeneratorConfig c, const std::string& field) {
    try {
      generate(c);
      FAIL() << "expected ConfigError for " << field;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  GeneratorConfig c;
  c.prevalence = 1.0;
  expect_field(c, "prevalence");
  c = {};
  c.signal_tokens = {"notaword"};
  expect_field(c, "signal_tokens");
  c = {};
  c.notes_per_patient.min = 0;
  expect_field(c, "notes_per_patient");
  c = {};
  c.signal_rate = 1.5;
  expect_field(c, "signal_rate");
}

TEST(CorpusIo, EmptyCorpusRoundTrip) {
  std::stringstream ss;
  write_corpus(ss, {});
  EXPECT_TRUE(ss.str().empty());
  EXPECT_TRUE(read_corpus(ss).empty());
}

TEST(CorpusIo, SinglePatientRoundTrip) {
  Patient p;
  p.patient_id = "X1";
  p.birth_year = 1960;
  p.diagnosis_date = make_date(2015, 3, 4);
  p.notes = {{"X1-a", make_date(2014, 1, 2), "hoest en koorts"}, {"X1-b", std::nullopt, "geen datum, \"quote\" ü"}};
  std::stringstream ss;
  write_corpus(ss, {p});
  const auto back = read_corpus(ss);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0], p);
  EXPECT_NE(ss.str().find(kAbsent), std::string::npos);
}

TEST(CorpusIo, LargeCorpusRoundTripByHash) {
  const auto corpus = generate(small_config(10000, 3));
  const auto path = std::filesystem::temp_directory_path() / "promptrisk_corpus_rt.jsonl";
  save_corpus(corpus, path.string());
  const auto back = load_corpus(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(corpus_hash(back), corpus_hash(corpus));
  EXPECT_EQ(back, corpus);
}

TEST(CorpusIo, MalformedLineReportsLineNumber) {
  Patient p;
  p.patient_id = "A";
  p.birth_year = 1950;
  p.notes = {{"A-1", make_date(2010, 1, 1), "x"}};
  std::stringstream ss;
  write_corpus(ss, {p, p});
  ss << "{\"patient_id\": 3}\n";
  try {
    read_corpus(ss);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::stringstream bad_date("{\"patient_id\":\"B\",\"birth_year\":1950,\"diagnosis_date\":\"2010-13-01\",\"notes\":[]}\n");
  EXPECT_THROW(read_corpus(bad_date), ParseError);
}

}  // namespace
}  // namespace promptrisk
