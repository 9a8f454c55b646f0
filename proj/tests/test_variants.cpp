#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>

#include "helpers.hpp"
#include "malaudit/variants.hpp"

using namespace malaudit;

namespace {

Corpus seven_year_corpus(int per_cell = 40) {
  SynthSpec s = default_synth_spec();
  s.years = {2010, 2016};
  s.per_cell_count = per_cell;
  return generate_synthetic(s);
}

std::map<int, int> year_histogram(const Variant& v, Label label) {
  std::map<int, int> h;
  for (const Sample& s : v.samples) {
    if (s.label == label) ++h[s.year];
  }
  return h;
}

}  // namespace

TEST_CASE("built-in settings cover the five era layouts") {
  std::vector<VariantSpec> specs = builtin_specs({2010, 2020}, 100, 7);
  REQUIRE(specs.size() == 5);

  CHECK(specs[0].name == "baseline");
  CHECK(specs[0].malware_years == YearRange{2010, 2020});
  CHECK(specs[0].benign_years == YearRange{2010, 2020});

  CHECK(specs[1].name == "v1");
  CHECK(specs[1].malware_years == YearRange{2018, 2020});
  CHECK(specs[1].benign_years == YearRange{2018, 2020});

  CHECK(specs[2].name == "v2");
  CHECK(specs[2].malware_years == YearRange{2010, 2012});
  CHECK(specs[2].benign_years == YearRange{2010, 2012});

  CHECK(specs[3].name == "v3");
  CHECK(specs[3].malware_years == YearRange{2018, 2020});
  CHECK(specs[3].benign_years == YearRange{2010, 2012});

  CHECK(specs[4].name == "v4");
  CHECK(specs[4].malware_years == YearRange{2010, 2012});
  CHECK(specs[4].benign_years == YearRange{2018, 2020});

  // Distinct derived seeds, stable across calls.
  std::set<std::uint64_t> seeds;
  for (const VariantSpec& v : specs) seeds.insert(v.seed);
  CHECK(seeds.size() == 5);
  CHECK(builtin_specs({2010, 2020}, 100, 7)[3].seed == specs[3].seed);

  // At 11,000 draws per (year,class), the three-year settings hold 33,000
  // samples of each class.
  std::vector<VariantSpec> full = builtin_specs({2010, 2020}, 11000, 7);
  for (std::size_t i = 1; i < full.size(); ++i) {
    CHECK(full[i].per_year_per_class * full[i].malware_years.span() == 33000);
    CHECK(full[i].per_year_per_class * full[i].benign_years.span() == 33000);
  }
}

TEST_CASE("built-in settings need a six-year span") {
  CHECK_THROWS_AS(builtin_specs({2010, 2014}, 10, 7), DataError);
  CHECK_NOTHROW(builtin_specs({2010, 2015}, 10, 7));
}

TEST_CASE("variant draws keep the requested class ratio exactly") {
  Corpus c = seven_year_corpus();
  VariantSpec spec;
  spec.name = "skew";
  spec.malware_years = {2010, 2012};
  spec.benign_years = {2013, 2014};
  spec.per_year_per_class = 20;
  spec.ratio = {4, 1};
  spec.seed = 99;

  Variant v = build_variant(c, spec);
  CHECK(v.count(Label::malware) == 60);  // full malware capacity, 4 units x 15
  CHECK(v.count(Label::benign) == 15);

  // Even per-year split with the remainder on the earliest years.
  std::map<int, int> mal = year_histogram(v, Label::malware);
  CHECK(mal[2010] == 20);
  CHECK(mal[2011] == 20);
  CHECK(mal[2012] == 20);
  std::map<int, int> ben = year_histogram(v, Label::benign);
  CHECK(ben[2013] == 8);
  CHECK(ben[2014] == 7);

  // Draws are without replacement.
  std::set<std::string> ids;
  for (const Sample& s : v.samples) ids.insert(s.sample_id);
  CHECK(ids.size() == v.samples.size());

  // Classes only come from their year windows.
  for (const Sample& s : v.samples) {
    if (s.label == Label::malware) {
      CHECK(spec.malware_years.contains(s.year));
    } else {
      CHECK(spec.benign_years.contains(s.year));
    }
  }
}

TEST_CASE("variant drawing is deterministic in the spec seed") {
  Corpus c = seven_year_corpus();
  VariantSpec spec;
  spec.name = "det";
  spec.malware_years = {2010, 2012};
  spec.benign_years = {2014, 2016};
  spec.per_year_per_class = 25;
  spec.seed = 5;

  Variant a = build_variant(c, spec);
  Variant b = build_variant(c, spec);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].sample_id == b.samples[i].sample_id);
  }

  spec.seed = 6;
  Variant other = build_variant(c, spec);
  bool same_order = true;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    same_order &= (a.samples[i].sample_id == other.samples[i].sample_id);
  }
  CHECK_FALSE(same_order);
}

TEST_CASE("variant errors are specific") {
  Corpus c = seven_year_corpus();

  SECTION("years outside the corpus span") {
    VariantSpec spec;
    spec.name = "future";
    spec.malware_years = {2025, 2025};
    spec.benign_years = {2010, 2012};
    spec.per_year_per_class = 10;
    CHECK_THROWS_WITH(
        build_variant(c, spec),
        Catch::Matchers::ContainsSubstring("outside the corpus span"));
  }

  SECTION("insufficient cell names year and class") {
    VariantSpec spec;
    spec.name = "greedy";
    spec.malware_years = {2011, 2011};
    spec.benign_years = {2012, 2012};
    spec.per_year_per_class = 41;  // cells hold 40
    CHECK_THROWS_WITH(build_variant(c, spec),
                      Catch::Matchers::ContainsSubstring("2011") &&
                          Catch::Matchers::ContainsSubstring("malware"));
  }

  SECTION("empty year range") {
    VariantSpec spec;
    spec.name = "empty";
    spec.malware_years = {2012, 2010};
    spec.benign_years = {2010, 2012};
    spec.per_year_per_class = 10;
    CHECK_THROWS_AS(build_variant(c, spec), DataError);
  }

  SECTION("non-positive per-year count") {
    VariantSpec spec;
    spec.name = "zero";
    spec.malware_years = {2010, 2012};
    spec.benign_years = {2010, 2012};
    spec.per_year_per_class = 0;
    CHECK_THROWS_AS(build_variant(c, spec), DataError);
  }
}

TEST_CASE("stratified folds balance size and class composition") {
  Corpus c = seven_year_corpus();
  VariantSpec spec;
  spec.name = "folds";
  spec.malware_years = {2010, 2012};
  spec.benign_years = {2013, 2016};
  spec.per_year_per_class = 13;
  spec.ratio = {2, 1};
  spec.seed = 11;
  Variant v = build_variant(c, spec);
  // 3 years x 13 = 39 malware capacity, 4 x 13 = 52 benign capacity,
  // units = min(39/2, 52/1) = 19 -> 38 malware, 19 benign.
  REQUIRE(v.count(Label::malware) == 38);
  REQUIRE(v.count(Label::benign) == 19);

  int k = 5;
  FoldAssignment folds = stratified_kfold(v, k, 123);
  REQUIRE(folds.fold_of.size() == v.samples.size());

  std::vector<int> size(static_cast<std::size_t>(k), 0);
  std::vector<int> mal(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < v.samples.size(); ++i) {
    int f = folds.fold_of[i];
    REQUIRE(f >= 0);
    REQUIRE(f < k);
    ++size[static_cast<std::size_t>(f)];
    mal[static_cast<std::size_t>(f)] +=
        (v.samples[i].label == Label::malware);
  }
  auto [smin, smax] = std::minmax_element(size.begin(), size.end());
  CHECK(*smax - *smin <= 1);
  auto [mmin, mmax] = std::minmax_element(mal.begin(), mal.end());
  CHECK(*mmax - *mmin <= 1);

  // Determinism.
  FoldAssignment again = stratified_kfold(v, k, 123);
  CHECK(again.fold_of == folds.fold_of);
  FoldAssignment reseeded = stratified_kfold(v, k, 124);
  CHECK(reseeded.fold_of != folds.fold_of);
}

TEST_CASE("fold assignment rejects unusable k") {
  Corpus c = seven_year_corpus();
  VariantSpec spec;
  spec.name = "tiny";
  spec.malware_years = {2010, 2010};
  spec.benign_years = {2010, 2010};
  spec.per_year_per_class = 4;
  Variant v = build_variant(c, spec);

  CHECK_THROWS_AS(stratified_kfold(v, 1, 1), DataError);
  CHECK_THROWS_WITH(stratified_kfold(v, 5, 1),
                    Catch::Matchers::ContainsSubstring("4") &&
                        Catch::Matchers::ContainsSubstring("5 folds"));
  CHECK_NOTHROW(stratified_kfold(v, 4, 1));
}

TEST_CASE("year sweep enumerates benign years by ratio") {
  std::vector<Ratio> ratios = {{1, 1}, {4, 1}, {1, 4}};
  std::vector<int> years;
  for (int y = 2010; y <= 2020; ++y) years.push_back(y);
  std::vector<VariantSpec> specs = year_sweep_specs(2010, years, ratios, 50, 3);
  REQUIRE(specs.size() == 33);

  CHECK(specs[0].name == "sweep_m2010_b2010_1to1");
  CHECK(specs[1].name == "sweep_m2010_b2010_4to1");
  CHECK(specs[2].name == "sweep_m2010_b2010_1to4");
  CHECK(specs[32].name == "sweep_m2010_b2020_1to4");

  std::set<std::uint64_t> seeds;
  for (const VariantSpec& v : specs) {
    CHECK(v.malware_years == YearRange{2010, 2010});
    CHECK(v.benign_years.span() == 1);
    seeds.insert(v.seed);
  }
  CHECK(seeds.size() == specs.size());

  CHECK_THROWS_AS(year_sweep_specs(2010, {}, ratios, 50, 3), DataError);
  CHECK_THROWS_AS(year_sweep_specs(2010, years, {}, 50, 3), DataError);
}

TEST_CASE("variant spec JSON round-trip") {
  VariantSpec v;
  v.name = "custom";
  v.malware_years = {2011, 2013};
  v.benign_years = {2015, 2016};
  v.per_year_per_class = 77;
  v.ratio = {1, 4};
  v.seed = 4242;

  VariantSpec back = variant_spec_from_json(to_json(v));
  CHECK(back.name == v.name);
  CHECK(back.malware_years == v.malware_years);
  CHECK(back.benign_years == v.benign_years);
  CHECK(back.per_year_per_class == v.per_year_per_class);
  CHECK(back.ratio == v.ratio);
  CHECK(back.seed == v.seed);
}
