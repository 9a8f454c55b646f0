#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "malaudit/corpus.hpp"
#include "malaudit/errors.hpp"
#include "malaudit/rng.hpp"

namespace malaudit {

// ---------------------------------------------------------------------------
// Variant specs: which years each class is drawn from, at what ratio
// ---------------------------------------------------------------------------

struct Ratio {
  int malware = 1;
  int benign = 1;

  bool operator==(const Ratio&) const = default;
};

struct VariantSpec {
  std::string name;
  YearRange malware_years;
  YearRange benign_years;
  int per_year_per_class = 0;  // requested draw per (year,class) cell
  Ratio ratio{1, 1};
  std::uint64_t seed = 0;

  void validate() const {
    if (name.empty()) throw DataError("variant spec has an empty name");
    validate_year_range(malware_years, "variant '" + name + "' malware class");
    validate_year_range(benign_years, "variant '" + name + "' benign class");
    if (per_year_per_class <= 0) {
      throw DataError("variant '" + name +
                      "': per_year_per_class must be positive");
    }
    if (ratio.malware <= 0 || ratio.benign <= 0) {
      throw DataError("variant '" + name + "': ratio parts must be positive");
    }
  }
};

inline json to_json(const VariantSpec& v) {
  return json{{"name", v.name},
              {"malware_years", {v.malware_years.first, v.malware_years.last}},
              {"benign_years", {v.benign_years.first, v.benign_years.last}},
              {"per_year_per_class", v.per_year_per_class},
              {"ratio", {v.ratio.malware, v.ratio.benign}},
              {"seed", v.seed}};
}

inline VariantSpec variant_spec_from_json(const json& j) {
  VariantSpec v;
  v.name = j.at("name").get<std::string>();
  auto range = [&](const char* key) {
    const json& r = j.at(key);
    if (!r.is_array() || r.size() != 2) {
      throw DataError(std::string("variant spec: '") + key +
                      "' must be [first, last]");
    }
    return YearRange{r[0].get<int>(), r[1].get<int>()};
  };
  v.malware_years = range("malware_years");
  v.benign_years = range("benign_years");
  if (j.contains("per_year_per_class")) {
    v.per_year_per_class = j.at("per_year_per_class").get<int>();
  }
  if (j.contains("ratio")) {
    const json& r = j.at("ratio");
    if (!r.is_array() || r.size() != 2) {
      throw DataError("variant spec: 'ratio' must be [malware, benign]");
    }
    v.ratio = {r[0].get<int>(), r[1].get<int>()};
  }
  if (j.contains("seed")) v.seed = j.at("seed").get<std::uint64_t>();
  return v;
}

// ---------------------------------------------------------------------------
// Materialized variants
// ---------------------------------------------------------------------------

struct Variant {
  VariantSpec spec;
  std::vector<Sample> samples;  // drawn and shuffled deterministically

  std::size_t count(Label label) const {
    std::size_t n = 0;
    for (const Sample& s : samples) n += (s.label == label);
    return n;
  }
};

namespace detail {

// Even split of total over years, remainder going to the earliest years.
inline std::map<int, int> per_year_targets(const YearRange& years, int total) {
  int n = years.span();
  int base = total / n;
  int rem = total % n;
  std::map<int, int> out;
  for (int y = years.first; y <= years.last; ++y) {
    out[y] = base + (y - years.first < rem ? 1 : 0);
  }
  return out;
}

}  // namespace detail

// Draw a variant from the corpus. Class totals keep the requested ratio
// exactly: with capacity P per (year,class) cell, k = floor(min(P*Ym/rm,
// P*Yb/rb)) ratio units are drawn, i.e. k*rm malware and k*rb benign.
// Per-year draws are even with the remainder on the earliest years; every
// cell draw is without replacement, and the concatenated list gets one final
// Fisher-Yates pass so downstream fold assignment is independent of corpus
// file order.
inline Variant build_variant(const Corpus& corpus, const VariantSpec& spec) {
  spec.validate();
  YearRange span = corpus.year_span();
  for (const auto& [range, what] :
       {std::pair{spec.malware_years, "malware"},
        std::pair{spec.benign_years, "benign"}}) {
    if (range.first < span.first || range.last > span.last) {
      throw DataError("variant '" + spec.name + "': " + what + " years [" +
                      std::to_string(range.first) + ", " +
                      std::to_string(range.last) +
                      "] fall outside the corpus span [" +
                      std::to_string(span.first) + ", " +
                      std::to_string(span.last) + "]");
    }
  }

  long cap_m = static_cast<long>(spec.per_year_per_class) *
               spec.malware_years.span();
  long cap_b =
      static_cast<long>(spec.per_year_per_class) * spec.benign_years.span();
  long units = std::min(cap_m / spec.ratio.malware, cap_b / spec.ratio.benign);
  if (units <= 0) {
    throw DataError("variant '" + spec.name +
                    "': ratio unsatisfiable at per_year_per_class " +
                    std::to_string(spec.per_year_per_class));
  }
  int total_m = static_cast<int>(units * spec.ratio.malware);
  int total_b = static_cast<int>(units * spec.ratio.benign);

  auto cells = corpus.cell_index();
  Rng rng(seed_mix(spec.seed, "draw"));
  Variant out;
  out.spec = spec;

  auto draw_class = [&](Label label, const YearRange& years, int total) {
    std::map<int, int> targets = detail::per_year_targets(years, total);
    for (int y = years.first; y <= years.last; ++y) {
      int want = targets[y];
      if (want == 0) continue;
      auto it = cells.find({y, label});
      std::size_t have = it == cells.end() ? 0 : it->second.size();
      if (have < static_cast<std::size_t>(want)) {
        throw DataError("variant '" + spec.name + "': cell (year " +
                        std::to_string(y) + ", " +
                        std::string(to_string(label)) + ") has " +
                        std::to_string(have) + " samples, needs " +
                        std::to_string(want));
      }
      std::vector<std::size_t> pool = it->second;
      rng.shuffle(pool);
      for (int i = 0; i < want; ++i) {
        out.samples.push_back(corpus.samples[pool[static_cast<std::size_t>(i)]]);
      }
    }
  };

  draw_class(Label::malware, spec.malware_years, total_m);
  draw_class(Label::benign, spec.benign_years, total_b);
  rng.shuffle(out.samples);
  return out;
}

// ---------------------------------------------------------------------------
// Built-in settings: baseline plus the four era-controlled variants
// ---------------------------------------------------------------------------

// baseline: both classes from the full span
// v1: both classes from the latest 3 years
// v2: both classes from the earliest 3 years
// v3: benign earliest 3, malware latest 3
// v4: malware earliest 3, benign latest 3
inline std::vector<VariantSpec> builtin_specs(const YearRange& corpus_years,
                                              int per_year_per_class,
                                              std::uint64_t base_seed) {
  validate_year_range(corpus_years, "corpus");
  if (corpus_years.span() < 6) {
    throw DataError("corpus span " + std::to_string(corpus_years.span()) +
                    " is too short: era-controlled variants need at least 6 "
                    "years");
  }
  if (per_year_per_class <= 0) {
    throw DataError("per_year_per_class must be positive");
  }
  YearRange first3{corpus_years.first, corpus_years.first + 2};
  YearRange last3{corpus_years.last - 2, corpus_years.last};
  auto make = [&](const std::string& name, YearRange m, YearRange b) {
    VariantSpec v;
    v.name = name;
    v.malware_years = m;
    v.benign_years = b;
    v.per_year_per_class = per_year_per_class;
    v.seed = seed_mix(base_seed, "variant", name);
    return v;
  };
  return {
      make("baseline", corpus_years, corpus_years),
      make("v1", last3, last3),
      make("v2", first3, first3),
      make("v3", last3, first3),
      make("v4", first3, last3),
  };
}

// ---------------------------------------------------------------------------
// Stratified k-fold assignment
// ---------------------------------------------------------------------------

struct FoldAssignment {
  int k = 0;
  std::vector<int> fold_of;  // parallel to Variant::samples
};

// Each class is shuffled separately, then dealt round-robin; benign deals
// from the top fold downward so overall fold sizes differ by at most one.
inline FoldAssignment stratified_kfold(const Variant& v, int k,
                                       std::uint64_t seed) {
  if (k < 2) throw DataError("k-fold needs k >= 2");
  std::vector<std::size_t> malware, benign;
  for (std::size_t i = 0; i < v.samples.size(); ++i) {
    (v.samples[i].label == Label::malware ? malware : benign).push_back(i);
  }
  for (const auto& [group, label] :
       {std::pair{&malware, "malware"}, std::pair{&benign, "benign"}}) {
    if (group->size() < static_cast<std::size_t>(k)) {
      throw DataError("variant '" + v.spec.name + "': only " +
                      std::to_string(group->size()) + " " + label +
                      " samples for " + std::to_string(k) + " folds");
    }
  }
  Rng rng(seed_mix(seed, "folds", v.spec.name));
  rng.shuffle(malware);
  rng.shuffle(benign);
  FoldAssignment out;
  out.k = k;
  out.fold_of.assign(v.samples.size(), -1);
  for (std::size_t j = 0; j < malware.size(); ++j) {
    out.fold_of[malware[j]] = static_cast<int>(j % static_cast<std::size_t>(k));
  }
  for (std::size_t j = 0; j < benign.size(); ++j) {
    out.fold_of[benign[j]] =
        k - 1 - static_cast<int>(j % static_cast<std::size_t>(k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Year sweep: malware pinned to one year, benign walks the span
// ---------------------------------------------------------------------------

inline std::vector<VariantSpec> year_sweep_specs(
    int malware_year, const std::vector<int>& benign_years,
    const std::vector<Ratio>& ratios, int per_year_per_class,
    std::uint64_t base_seed) {
  if (benign_years.empty()) throw DataError("year sweep: no benign years");
  if (ratios.empty()) throw DataError("year sweep: no ratios");
  std::vector<VariantSpec> out;
  for (int by : benign_years) {
    for (const Ratio& r : ratios) {
      VariantSpec v;
      v.name = "sweep_m" + std::to_string(malware_year) + "_b" +
               std::to_string(by) + "_" + std::to_string(r.malware) + "to" +
               std::to_string(r.benign);
      v.malware_years = {malware_year, malware_year};
      v.benign_years = {by, by};
      v.per_year_per_class = per_year_per_class;
      v.ratio = r;
      v.seed = seed_mix(base_seed, "variant", v.name);
      out.push_back(std::move(v));
    }
  }
  return out;
}

}  // namespace malaudit
