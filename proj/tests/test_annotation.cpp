#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <sstream>

#include "convsafe/annotation.hpp"
#include "convsafe/rng.hpp"
#include "oracles.hpp"

using namespace convsafe;
using Catch::Matchers::WithinAbs;

namespace {

// Canonical 4-coder x 12-unit reliability data with missing values (0 = missing).
const int kReliability[4][12] = {
    {1, 2, 3, 3, 2, 1, 4, 1, 2, 0, 0, 0},
    {1, 2, 3, 3, 2, 2, 4, 1, 2, 5, 0, 3},
    {0, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, 0},
    {1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, 0},
};

LabelMatrix reliability_matrix() {
  LabelMatrix m(12, std::vector<std::optional<int>>(4));
  for (int c = 0; c < 4; ++c)
    for (int u = 0; u < 12; ++u)
      if (kReliability[c][u]) m[u][c] = kReliability[c][u];
  return m;
}

UtteranceJudgment judge(std::size_t idx, Offense4 off, std::map<std::size_t, Stance> stance = {},
                        std::set<std::string> targets = {}) {
  UtteranceJudgment j;
  j.idx = idx;
  j.offensive = off;
  j.stance = std::move(stance);
  j.targets = std::move(targets);
  return j;
}

}  // namespace

TEST_CASE("offense vote mapping", "[annotation]") {
  CHECK(map_offense_4to2(Offense4::Yes));
  CHECK(map_offense_4to2(Offense4::Maybe));
  CHECK_FALSE(map_offense_4to2(Offense4::No));
  CHECK_FALSE(map_offense_4to2(Offense4::NotSure));
  for (auto v : {Offense4::Yes, Offense4::Maybe, Offense4::No, Offense4::NotSure})
    CHECK(offense4_from_string(to_string(v)) == v);
  CHECK_THROWS_AS(offense4_from_string("perhaps"), SchemaError);
}

TEST_CASE("offensive gold over every 5-worker vote pattern", "[annotation][exhaustive]") {
  const Offense4 all[] = {Offense4::Yes, Offense4::Maybe, Offense4::No, Offense4::NotSure};
  int positives = 0;
  for (int code = 0; code < 1024; ++code) {
    std::vector<Offense4> votes;
    int yes_or_maybe = 0;
    for (int w = 0, c = code; w < 5; ++w, c /= 4) {
      votes.push_back(all[c % 4]);
      yes_or_maybe += (c % 4) < 2;
    }
    const bool want = yes_or_maybe >= 2;
    positives += want;
    CHECK(gold_offensive(votes) == want);
  }
  // Patterns with at most one Yes/Maybe: 2^5 + 5 * 2 * 2^4.
  CHECK(positives == 1024 - (32 + 160));
}

TEST_CASE("stance gold over every 5-worker vote pattern", "[annotation][exhaustive]") {
  for (int code = 0; code < 243; ++code) {
    std::vector<Stance> votes;
    int agree = 0, disagree = 0;
    for (int w = 0, c = code; w < 5; ++w, c /= 3) {
      votes.push_back(static_cast<Stance>(c % 3));
      agree += c % 3 == 1;
      disagree += c % 3 == 2;
    }
    std::vector<std::pair<int, Stance>> qualifying;
    if (agree >= 2) qualifying.push_back({agree, Stance::Agree});
    if (disagree >= 2) qualifying.push_back({disagree, Stance::Disagree});
    Stance want = Stance::Neutral;
    if (qualifying.size() == 1) want = qualifying[0].second;
    if (qualifying.size() == 2 && qualifying[0].first != qualifying[1].first)
      want = qualifying[0].first > qualifying[1].first ? qualifying[0].second : qualifying[1].second;
    CHECK(gold_stance(votes) == want);
  }
}

TEST_CASE("plausibility majority", "[annotation]") {
  CHECK_FALSE(gold_plausible({}).has_value());
  CHECK(gold_plausible({true, false}) == true);
  CHECK(gold_plausible({false, false, true}) == false);
}

TEST_CASE("thread aggregation", "[annotation]") {
  std::vector<WorkerAnnotation> annos;
  const Offense4 off2[] = {Offense4::Yes, Offense4::Maybe, Offense4::No};
  const Stance st32[] = {Stance::Disagree, Stance::Disagree, Stance::Agree};
  for (int w = 0; w < 3; ++w) {
    WorkerAnnotation a{"w" + std::to_string(w), "t", {}};
    a.items.push_back(judge(1, Offense4::No));
    a.items.push_back(judge(2, off2[w], {{1, Stance::Neutral}}, map_offense_4to2(off2[w]) ? std::set<std::string>{"women"} : std::set<std::string>{}));
    a.items.push_back(judge(3, Offense4::No, {{1, Stance::Agree}, {2, st32[w]}}));
    a.items.back().plausible = w != 0;
    annos.push_back(a);
  }
  auto g = aggregate_gold(annos);
  REQUIRE(g.per_utterance.size() == 3);
  CHECK_FALSE(g.at(1).offensive);
  CHECK(g.at(2).offensive);
  CHECK(g.at(2).targets.at("women") == 2);
  CHECK(g.at(3).plausible == true);
  CHECK(g.stance_pairs.size() == 3);
  CHECK(g.stance_pairs.at({2, 1}) == Stance::Neutral);
  CHECK(g.stance_pairs.at({3, 1}) == Stance::Agree);
  CHECK(g.stance_pairs.at({3, 2}) == Stance::Disagree);

  SECTION("gold JSON round trip") {
    CHECK(aggregated_from_json(to_json(g)) == g);
    std::stringstream ss;
    ss << to_json(g).dump() << "\n";
    auto parsed = parse_gold(ss);
    REQUIRE(parsed.items.size() == 1);
    CHECK(parsed.items[0] == g);
  }
  SECTION("missing stance pair") {
    annos[0].items[2].stance.erase(2);
    annos[1].items[2].stance.erase(2);
    annos[2].items[2].stance.erase(2);
    try {
      aggregate_gold(annos);
      FAIL("expected MissingCoverage");
    } catch (const MissingCoverage& e) {
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("2<-3"));
    }
  }
  SECTION("uncovered utterance given the thread length") {
    CHECK_THROWS_AS(aggregate_gold(annos, 2, 4), MissingCoverage);
  }
  SECTION("mixed threads") {
    annos[1].thread_id = "other";
    CHECK_THROWS_AS(aggregate_gold(annos), UsageError);
    auto all = aggregate_all({annos[0], annos[2]});
    CHECK(all.size() == 1);
  }
}

TEST_CASE("annotation validation and JSON", "[annotation]") {
  WorkerAnnotation a{"w1", "t1", {judge(1, Offense4::Yes, {}, {"women"}), judge(2, Offense4::No, {{1, Stance::Agree}})}};
  a.items[1].plausible = false;
  CHECK_NOTHROW(validate(a));
  CHECK(worker_annotation_from_json(to_json(a)) == a);

  TargetVocabulary vocab({"women"});
  CHECK_NOTHROW(validate(a, &vocab));
  CHECK(vocab.contains("none"));
  CHECK(vocab.contains("other"));

  SECTION("stance toward a later utterance") {
    a.items[1].stance[2] = Stance::Agree;
    CHECK_THROWS_AS(validate(a), SchemaError);
  }
  SECTION("targets on a safe utterance") {
    a.items[1].targets = {"women"};
    CHECK_THROWS_AS(validate(a), SchemaError);
  }
  SECTION("unknown target group") {
    a.items[0].targets = {"robots"};
    CHECK_NOTHROW(validate(a));
    CHECK_THROWS_AS(validate(a, &vocab), SchemaError);
  }
  SECTION("malformed records") {
    CHECK_THROWS_AS(worker_annotation_from_json(json::parse(R"({"worker":"w","thread":"t"})")), SchemaError);
    CHECK_THROWS_AS(
        worker_annotation_from_json(json::parse(R"({"worker":"w","thread":"t","items":[{"idx":0,"off":"no"}]})")),
        SchemaError);
    CHECK_THROWS_AS(worker_annotation_from_json(json::parse(
                        R"({"worker":"w","thread":"t","items":[{"idx":1,"off":"no"},{"idx":1,"off":"no"}]})")),
                    SchemaError);
    CHECK_THROWS_AS(worker_annotation_from_json(json::parse(
                        R"({"worker":"w","thread":"t","items":[{"idx":2,"off":"no","stance":{"1":"maybe"}}]})")),
                    SchemaError);
  }
}

TEST_CASE("Krippendorff alpha on canonical reliability data", "[agreement]") {
  const auto m = reliability_matrix();
  const double alpha = krippendorff_alpha(m);
  CHECK_THAT(alpha, WithinAbs(oracle::alpha(m), 1e-9));
  CHECK_THAT(alpha, WithinAbs(0.743, 5e-4));
}

TEST_CASE("Krippendorff alpha properties", "[agreement][property]") {
  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t units = 2 + rng.below(20), coders = 2 + rng.below(5), labels = 2 + rng.below(4);
    LabelMatrix m(units, std::vector<std::optional<int>>(coders));
    for (auto& row : m)
      for (auto& v : row)
        if (rng.below(5)) v = static_cast<int>(rng.below(labels));
    double alpha;
    try {
      alpha = krippendorff_alpha(m);
    } catch (const NotEnoughData&) {
      continue;
    }
    const double want = oracle::alpha(m);
    if (std::isnan(want)) {
      // every pairable value carries the same label
      CHECK(alpha == 1.0);
      continue;
    }
    CHECK_THAT(alpha, WithinAbs(want, 1e-9));
    // relabelling and coder permutation leave alpha unchanged
    LabelMatrix relabelled = m;
    for (auto& row : relabelled) {
      std::reverse(row.begin(), row.end());
      for (auto& v : row)
        if (v) v = 100 - 7 * *v;
    }
    CHECK_THAT(krippendorff_alpha(relabelled), WithinAbs(alpha, 1e-12));
  }

  LabelMatrix perfect = {{1, 1, 1}, {2, 2, std::nullopt}, {3, 3, 3}};
  CHECK(krippendorff_alpha(perfect) == 1.0);
  LabelMatrix lonely = {{1, std::nullopt}, {std::nullopt, 2}};
  CHECK_THROWS_AS(krippendorff_alpha(lonely), NotEnoughData);
}

TEST_CASE("pairwise agreement and kappa", "[agreement]") {
  LabelMatrix m = {{1, 1, 1}, {1, 1, 0}, {0, std::nullopt, 0}};
  CHECK_THAT(pairwise_agreement(m), WithinAbs((1.0 + 1.0 / 3.0 + 1.0) / 3.0, 1e-12));

  // 20 yes/yes, 5 yes/no, 10 no/yes, 15 no/no: p_o = 0.7, p_e = 0.5.
  std::vector<int> a, b;
  auto add = [&](int x, int y, int n) {
    for (int i = 0; i < n; ++i) {
      a.push_back(x);
      b.push_back(y);
    }
  };
  add(1, 1, 20);
  add(1, 0, 5);
  add(0, 1, 10);
  add(0, 0, 15);
  CHECK_THAT(cohens_kappa(a, b), WithinAbs(0.4, 1e-12));
  CHECK_THROWS_AS(cohens_kappa(a, std::vector<int>{1}), LengthMismatch);
}

TEST_CASE("agreement matrices from worker annotations", "[agreement]") {
  std::vector<WorkerAnnotation> annos = {
      {"w1", "t", {judge(1, Offense4::Yes), judge(2, Offense4::No, {{1, Stance::Agree}})}},
      {"w2", "t", {judge(1, Offense4::Maybe), judge(2, Offense4::NotSure, {{1, Stance::Agree}})}},
      {"w3", "t", {judge(1, Offense4::No)}},
  };
  auto m = build_agreement_matrices(annos);
  CHECK(m.n_coders == 3);
  REQUIRE(m.offensive.size() == 2);
  CHECK(m.offensive[0] == std::vector<std::optional<int>>{1, 1, 0});
  CHECK(m.offensive[1] == std::vector<std::optional<int>>{0, 0, std::nullopt});
  REQUIRE(m.stance.size() == 1);
  CHECK(m.stance[0] == std::vector<std::optional<int>>{1, 1, std::nullopt});
  auto r = agreement_report(m.offensive, m.n_coders);
  CHECK(r.n_items == 2);
}
