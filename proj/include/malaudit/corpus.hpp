#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "malaudit/errors.hpp"
#include "malaudit/rng.hpp"

namespace malaudit {

using json = nlohmann::json;

inline constexpr std::string_view kCorpusSchemaVersion = "1";

// ---------------------------------------------------------------------------
// Labels and feature categories
// ---------------------------------------------------------------------------

enum class Label { benign, malware };

inline std::string_view to_string(Label l) {
  return l == Label::malware ? "malware" : "benign";
}

inline Label label_from_string(std::string_view s) {
  if (s == "malware") return Label::malware;
  if (s == "benign") return Label::benign;
  throw DataError("unknown label '" + std::string(s) + "'");
}

// Static feature families of an app profile (manifest + code + network).
enum class Category {
  hardware_component,
  requested_permission,
  app_component,
  filtered_intent,
  restricted_api,
  used_permission,
  suspicious_api,
  network_address,
};

inline constexpr std::array<Category, 8> kAllCategories = {
    Category::hardware_component, Category::requested_permission,
    Category::app_component,      Category::filtered_intent,
    Category::restricted_api,     Category::used_permission,
    Category::suspicious_api,     Category::network_address,
};

inline std::string_view to_string(Category c) {
  switch (c) {
    case Category::hardware_component: return "hardware_component";
    case Category::requested_permission: return "requested_permission";
    case Category::app_component: return "app_component";
    case Category::filtered_intent: return "filtered_intent";
    case Category::restricted_api: return "restricted_api";
    case Category::used_permission: return "used_permission";
    case Category::suspicious_api: return "suspicious_api";
    case Category::network_address: return "network_address";
  }
  throw DataError("invalid category value");
}

inline Category category_from_string(std::string_view s) {
  for (Category c : kAllCategories) {
    if (to_string(c) == s) return c;
  }
  throw DataError("unknown category '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Year ranges
// ---------------------------------------------------------------------------

// Inclusive calendar-year window.
struct YearRange {
  int first = 0;
  int last = 0;

  bool contains(int y) const { return y >= first && y <= last; }
  int span() const { return last - first + 1; }

  bool operator==(const YearRange&) const = default;
};

inline void validate_year_range(const YearRange& r, std::string_view what) {
  if (r.first > r.last) {
    throw DataError("empty year range for " + std::string(what) + ": [" +
                    std::to_string(r.first) + ", " + std::to_string(r.last) +
                    "]");
  }
}

// ---------------------------------------------------------------------------
// Features and catalogs
// ---------------------------------------------------------------------------

inline constexpr int kYearLo = 1990;
inline constexpr int kYearHi = 2100;

struct FeatureDescriptor {
  std::uint32_t id = 0;
  std::string name;
  Category category = Category::hardware_component;
  std::optional<int> added_year;    // first year the platform offers it
  std::optional<int> removed_year;  // last year it is available (deprecation
                                    // counts as removal)
  bool malice_signal = false;       // synthetic corpora: class-correlated flag

  bool operator==(const FeatureDescriptor&) const = default;
};

struct FeatureCatalog {
  std::string schema_version = std::string(kCorpusSchemaVersion);
  std::vector<FeatureDescriptor> features;

  std::size_t size() const { return features.size(); }

  const FeatureDescriptor& at(std::uint32_t id) const {
    if (id >= features.size()) {
      throw DataError("feature id " + std::to_string(id) +
                      " out of range (catalog size " +
                      std::to_string(features.size()) + ")");
    }
    return features[id];
  }

  // Ids dense 0..d-1 in order, names unique and non-empty, years sane.
  void validate() const {
    std::map<std::string_view, std::uint32_t> seen;
    for (std::size_t i = 0; i < features.size(); ++i) {
      const FeatureDescriptor& f = features[i];
      if (f.id != i) {
        throw DataError("catalog ids must be dense and ascending: position " +
                        std::to_string(i) + " holds id " +
                        std::to_string(f.id));
      }
      if (f.name.empty()) {
        throw DataError("feature " + std::to_string(f.id) +
                        " has an empty name");
      }
      if (auto [it, inserted] = seen.emplace(f.name, f.id); !inserted) {
        throw DataError("duplicate feature name '" + f.name + "' (ids " +
                        std::to_string(it->second) + " and " +
                        std::to_string(f.id) + ")");
      }
      for (const auto& [y, what] :
           {std::pair{f.added_year, "added_year"},
            std::pair{f.removed_year, "removed_year"}}) {
        if (y && (*y < kYearLo || *y > kYearHi)) {
          throw DataError("feature '" + f.name + "': " + what + " " +
                          std::to_string(*y) + " outside [" +
                          std::to_string(kYearLo) + ", " +
                          std::to_string(kYearHi) + "]");
        }
      }
      if (f.added_year && f.removed_year && *f.removed_year < *f.added_year) {
        throw DataError("feature '" + f.name +
                        "': removed_year precedes added_year");
      }
    }
  }

  bool operator==(const FeatureCatalog&) const = default;
};

// ---------------------------------------------------------------------------
// Lifecycle classification relative to a query window
// ---------------------------------------------------------------------------

enum class LifecycleClass { neutral, added, removed };

inline std::string_view to_string(LifecycleClass c) {
  switch (c) {
    case LifecycleClass::added: return "added";
    case LifecycleClass::removed: return "removed";
    case LifecycleClass::neutral: return "neutral";
  }
  throw DataError("invalid lifecycle class value");
}

struct LifecycleFlags {
  bool added = false;
  bool removed = false;
};

// added: the feature did not exist at the window start (added_year > first).
// removed: availability ends inside the window (first <= removed_year <= last).
// Both can hold at once; audits tally the flags independently.
inline LifecycleFlags lifecycle_flags(const FeatureDescriptor& f,
                                      const YearRange& window) {
  LifecycleFlags out;
  out.added = f.added_year && *f.added_year > window.first;
  out.removed = f.removed_year && window.contains(*f.removed_year);
  return out;
}

// Single-class view: when both flags hold, the event nearer its window
// boundary wins (added measured from the start, removed from the end); ties
// go to added.
inline LifecycleClass lifecycle_class(const FeatureDescriptor& f,
                                      const YearRange& window) {
  LifecycleFlags flags = lifecycle_flags(f, window);
  if (flags.added && flags.removed) {
    int d_added = *f.added_year - window.first;
    int d_removed = window.last - *f.removed_year;
    return d_added <= d_removed ? LifecycleClass::added
                                : LifecycleClass::removed;
  }
  if (flags.added) return LifecycleClass::added;
  if (flags.removed) return LifecycleClass::removed;
  return LifecycleClass::neutral;
}

// ---------------------------------------------------------------------------
// Samples and corpora
// ---------------------------------------------------------------------------

struct Sample {
  std::string sample_id;
  int year = 0;
  Label label = Label::benign;
  std::vector<std::uint32_t> present_features;  // strictly ascending

  bool contains(std::uint32_t f) const {
    return std::binary_search(present_features.begin(), present_features.end(),
                              f);
  }

  bool operator==(const Sample&) const = default;
};

struct Corpus {
  FeatureCatalog catalog;
  std::vector<Sample> samples;

  // Catalog and per-sample invariants, including era consistency: a sample
  // of year y never contains a feature added after y or removed before y.
  void validate() const {
    catalog.validate();
    std::map<std::string_view, std::size_t> ids;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Sample& s = samples[i];
      if (s.sample_id.empty()) {
        throw DataError("sample at position " + std::to_string(i) +
                        " has an empty sample_id");
      }
      if (auto [it, inserted] = ids.emplace(s.sample_id, i); !inserted) {
        throw DataError("duplicate sample_id '" + s.sample_id + "'");
      }
      std::uint32_t prev = 0;
      bool first = true;
      for (std::uint32_t f : s.present_features) {
        if (!first && f <= prev) {
          throw DataError("sample '" + s.sample_id +
                          "': present_features not strictly ascending");
        }
        prev = f;
        first = false;
        if (f >= catalog.size()) {
          throw DataError("sample '" + s.sample_id + "': feature id " +
                          std::to_string(f) + " out of range (catalog size " +
                          std::to_string(catalog.size()) + ")");
        }
        const FeatureDescriptor& fd = catalog.features[f];
        if (fd.added_year && *fd.added_year > s.year) {
          throw DataError("sample '" + s.sample_id + "' (year " +
                          std::to_string(s.year) + ") contains '" + fd.name +
                          "' added in " + std::to_string(*fd.added_year));
        }
        if (fd.removed_year && *fd.removed_year < s.year) {
          throw DataError("sample '" + s.sample_id + "' (year " +
                          std::to_string(s.year) + ") contains '" + fd.name +
                          "' removed in " + std::to_string(*fd.removed_year));
        }
      }
    }
  }

  YearRange year_span() const {
    if (samples.empty()) throw DataError("corpus has no samples");
    int lo = samples.front().year, hi = samples.front().year;
    for (const Sample& s : samples) {
      lo = std::min(lo, s.year);
      hi = std::max(hi, s.year);
    }
    return {lo, hi};
  }

  std::size_t cell_count(int year, Label label) const {
    std::size_t n = 0;
    for (const Sample& s : samples) {
      n += (s.year == year && s.label == label);
    }
    return n;
  }

  // (year,label) -> indices into samples, in file order.
  std::map<std::pair<int, Label>, std::vector<std::size_t>> cell_index() const {
    std::map<std::pair<int, Label>, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      out[{samples[i].year, samples[i].label}].push_back(i);
    }
    return out;
  }

  bool operator==(const Corpus&) const = default;
};

// ---------------------------------------------------------------------------
// JSON conversions (canonical: nlohmann objects keep keys sorted, so dump()
// of the same value is byte-stable)
// ---------------------------------------------------------------------------

inline json to_json(const FeatureDescriptor& f) {
  json j{{"id", f.id},
         {"name", f.name},
         {"category", std::string(to_string(f.category))}};
  if (f.added_year) j["added_year"] = *f.added_year;
  if (f.removed_year) j["removed_year"] = *f.removed_year;
  if (f.malice_signal) j["malice_signal"] = true;
  return j;
}

inline FeatureDescriptor feature_from_json(const json& j) {
  FeatureDescriptor f;
  f.id = j.at("id").get<std::uint32_t>();
  f.name = j.at("name").get<std::string>();
  f.category = category_from_string(j.at("category").get<std::string>());
  if (j.contains("added_year")) f.added_year = j.at("added_year").get<int>();
  if (j.contains("removed_year")) {
    f.removed_year = j.at("removed_year").get<int>();
  }
  if (j.contains("malice_signal")) {
    f.malice_signal = j.at("malice_signal").get<bool>();
  }
  return f;
}

inline json to_json(const FeatureCatalog& c) {
  json features = json::array();
  for (const FeatureDescriptor& f : c.features) features.push_back(to_json(f));
  return json{{"schema_version", c.schema_version},
              {"features", std::move(features)}};
}

inline FeatureCatalog catalog_from_json(const json& j) {
  FeatureCatalog c;
  c.schema_version = j.at("schema_version").get<std::string>();
  if (c.schema_version != kCorpusSchemaVersion) {
    throw DataError("unsupported corpus schema_version '" + c.schema_version +
                    "'");
  }
  for (const json& fj : j.at("features")) {
    c.features.push_back(feature_from_json(fj));
  }
  return c;
}

inline json to_json(const Sample& s) {
  return json{{"sample_id", s.sample_id},
              {"year", s.year},
              {"label", std::string(to_string(s.label))},
              {"features", s.present_features}};
}

inline Sample sample_from_json(const json& j) {
  Sample s;
  s.sample_id = j.at("sample_id").get<std::string>();
  s.year = j.at("year").get<int>();
  s.label = label_from_string(j.at("label").get<std::string>());
  s.present_features = j.at("features").get<std::vector<std::uint32_t>>();
  return s;
}

// ---------------------------------------------------------------------------
// JSONL persistence: line 1 is the catalog, every further line one sample
// ---------------------------------------------------------------------------

inline void save_corpus(const Corpus& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ComputeError("cannot open '" + path + "' for writing");
  out << to_json(c.catalog).dump() << '\n';
  for (const Sample& s : c.samples) out << to_json(s).dump() << '\n';
  out.flush();
  if (!out) throw ComputeError("write failure on '" + path + "'");
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file '" + path + "'");
  Corpus c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("parse error in '" + path + "' at line " +
                      std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (line_no == 1) {
        c.catalog = catalog_from_json(j);
      } else {
        c.samples.push_back(sample_from_json(j));
      }
    } catch (const json::exception& e) {
      throw DataError("invalid record in '" + path + "' at line " +
                      std::to_string(line_no) + ": " + e.what());
    }
  }
  if (line_no == 0) throw DataError("corpus file '" + path + "' is empty");
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

struct SynthSpec {
  std::uint64_t seed = 42;
  YearRange years{2010, 2020};
  int per_cell_count = 200;  // samples per (year,label) cell
  int per_cell_malware = 0;  // 0 = use per_cell_count
  int per_cell_benign = 0;   // 0 = use per_cell_count
  std::map<Category, int> features_per_category;
  double lifecycle_fraction_added = 0.35;
  double lifecycle_fraction_removed = 0.25;
  double base_presence_prob = 0.25;
  int malice_features = 6;  // class-correlated, era-neutral features
  double p_malware = 0.6;   // presence prob of a malice feature in malware
  double p_benign = 0.4;    // ... and in benign

  int malware_cell() const {
    return per_cell_malware > 0 ? per_cell_malware : per_cell_count;
  }
  int benign_cell() const {
    return per_cell_benign > 0 ? per_cell_benign : per_cell_count;
  }

  int total_features() const {
    int n = 0;
    for (const auto& [cat, k] : features_per_category) n += k;
    return n;
  }

  void validate() const {
    validate_year_range(years, "synthetic corpus");
    if (malware_cell() <= 0 || benign_cell() <= 0) {
      throw DataError("per-cell sample counts must be positive");
    }
    for (const auto& [cat, k] : features_per_category) {
      if (k < 0) {
        throw DataError("negative feature count for category " +
                        std::string(to_string(cat)));
      }
    }
    if (total_features() <= 0) throw DataError("catalog would be empty");
    for (const auto& [p, what] :
         {std::pair{lifecycle_fraction_added, "lifecycle_fraction_added"},
          std::pair{lifecycle_fraction_removed, "lifecycle_fraction_removed"},
          std::pair{base_presence_prob, "base_presence_prob"},
          std::pair{p_malware, "p_malware"},
          std::pair{p_benign, "p_benign"}}) {
      if (p < 0.0 || p > 1.0) {
        throw DataError(std::string(what) + " outside [0, 1]");
      }
    }
    if (malice_features < 0 || malice_features > total_features()) {
      throw DataError("malice_features outside [0, catalog size]");
    }
    if (malice_features > 0 && p_malware == p_benign) {
      throw DataError("malice features need p_malware != p_benign");
    }
  }
};

inline std::map<Category, int> default_category_mix() {
  return {
      {Category::hardware_component, 8},   {Category::requested_permission, 20},
      {Category::app_component, 14},       {Category::filtered_intent, 12},
      {Category::restricted_api, 14},      {Category::used_permission, 10},
      {Category::suspicious_api, 14},      {Category::network_address, 8},
  };
}

// Era-signal-dominant preset: lifecycle churn is strong, class signal mild.
inline SynthSpec default_synth_spec() {
  SynthSpec s;
  s.features_per_category = default_category_mix();
  return s;
}

// Class-imbalanced preset: 173 malware / 827 benign per (year,label)-pair,
// so the global malware ratio is exactly 0.173.
inline SynthSpec androzoo_ratio_synth_spec() {
  SynthSpec s = default_synth_spec();
  s.per_cell_malware = 173;
  s.per_cell_benign = 827;
  return s;
}

// No era-dependent lifecycles, strong class signal; classifiers must earn
// accuracy from malice features alone.
inline SynthSpec unbiased_synth_spec() {
  SynthSpec s = default_synth_spec();
  s.lifecycle_fraction_added = 0.0;
  s.lifecycle_fraction_removed = 0.0;
  s.malice_features = 10;
  s.p_malware = 0.7;
  s.p_benign = 0.3;
  return s;
}

inline json to_json(const SynthSpec& s) {
  json cats;
  for (const auto& [cat, k] : s.features_per_category) {
    cats[std::string(to_string(cat))] = k;
  }
  return json{{"seed", s.seed},
              {"years", {s.years.first, s.years.last}},
              {"per_cell_count", s.per_cell_count},
              {"per_cell_malware", s.per_cell_malware},
              {"per_cell_benign", s.per_cell_benign},
              {"features_per_category", std::move(cats)},
              {"lifecycle_fraction_added", s.lifecycle_fraction_added},
              {"lifecycle_fraction_removed", s.lifecycle_fraction_removed},
              {"base_presence_prob", s.base_presence_prob},
              {"malice_features", s.malice_features},
              {"p_malware", s.p_malware},
              {"p_benign", s.p_benign}};
}

inline SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s = default_synth_spec();
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("years")) {
    const json& y = j.at("years");
    if (!y.is_array() || y.size() != 2) {
      throw DataError("synthetic spec: 'years' must be [first, last]");
    }
    s.years = {y[0].get<int>(), y[1].get<int>()};
  }
  if (j.contains("per_cell_count")) {
    s.per_cell_count = j.at("per_cell_count").get<int>();
  }
  if (j.contains("per_cell_malware")) {
    s.per_cell_malware = j.at("per_cell_malware").get<int>();
  }
  if (j.contains("per_cell_benign")) {
    s.per_cell_benign = j.at("per_cell_benign").get<int>();
  }
  if (j.contains("features_per_category")) {
    s.features_per_category.clear();
    for (const auto& [key, val] : j.at("features_per_category").items()) {
      s.features_per_category[category_from_string(key)] = val.get<int>();
    }
  }
  if (j.contains("lifecycle_fraction_added")) {
    s.lifecycle_fraction_added = j.at("lifecycle_fraction_added").get<double>();
  }
  if (j.contains("lifecycle_fraction_removed")) {
    s.lifecycle_fraction_removed =
        j.at("lifecycle_fraction_removed").get<double>();
  }
  if (j.contains("base_presence_prob")) {
    s.base_presence_prob = j.at("base_presence_prob").get<double>();
  }
  if (j.contains("malice_features")) {
    s.malice_features = j.at("malice_features").get<int>();
  }
  if (j.contains("p_malware")) s.p_malware = j.at("p_malware").get<double>();
  if (j.contains("p_benign")) s.p_benign = j.at("p_benign").get<double>();
  return s;
}

// Feature is offered by the platform in year y.
inline bool feature_alive(const FeatureDescriptor& f, int y) {
  if (f.added_year && *f.added_year > y) return false;
  if (f.removed_year && *f.removed_year < y) return false;
  return true;
}

// Deterministic generator: one mt19937_64 stream seeded from spec.seed, a
// fixed draw order (catalog lifecycles, malice pick, then samples by year,
// malware cell before benign cell). Era consistency is hard: a sample never
// contains a feature outside its availability window.
inline Corpus generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(seed_mix(spec.seed, "synth"));
  Corpus c;

  char buf[64];
  for (Category cat : kAllCategories) {
    auto it = spec.features_per_category.find(cat);
    int n = it == spec.features_per_category.end() ? 0 : it->second;
    for (int k = 0; k < n; ++k) {
      FeatureDescriptor f;
      f.id = static_cast<std::uint32_t>(c.catalog.features.size());
      std::snprintf(buf, sizeof buf, "%s_%03d",
                    std::string(to_string(cat)).c_str(), k);
      f.name = buf;
      f.category = cat;
      if (rng.bernoulli(spec.lifecycle_fraction_added)) {
        // Strictly inside the window so the event is observable.
        f.added_year =
            static_cast<int>(rng.range(spec.years.first + 1, spec.years.last));
      }
      if (rng.bernoulli(spec.lifecycle_fraction_removed)) {
        int lo = f.added_year ? *f.added_year : spec.years.first;
        if (lo <= spec.years.last - 1) {
          f.removed_year = static_cast<int>(rng.range(lo, spec.years.last - 1));
        }
      }
      c.catalog.features.push_back(std::move(f));
    }
  }

  // Malice features are era-neutral: clear lifecycles so class signal never
  // aliases era signal.
  if (spec.malice_features > 0) {
    std::vector<std::uint32_t> ids(c.catalog.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      ids[i] = static_cast<std::uint32_t>(i);
    }
    rng.shuffle(ids);
    ids.resize(static_cast<std::size_t>(spec.malice_features));
    std::sort(ids.begin(), ids.end());
    for (std::uint32_t id : ids) {
      FeatureDescriptor& f = c.catalog.features[id];
      f.added_year.reset();
      f.removed_year.reset();
      f.malice_signal = true;
    }
  }

  for (int y = spec.years.first; y <= spec.years.last; ++y) {
    for (Label label : {Label::malware, Label::benign}) {
      int cell =
          label == Label::malware ? spec.malware_cell() : spec.benign_cell();
      for (int i = 0; i < cell; ++i) {
        Sample s;
        std::snprintf(buf, sizeof buf, "%c%d_%05d",
                      label == Label::malware ? 'm' : 'b', y, i);
        s.sample_id = buf;
        s.year = y;
        s.label = label;
        for (const FeatureDescriptor& f : c.catalog.features) {
          if (!feature_alive(f, y)) continue;
          double p = spec.base_presence_prob;
          if (f.malice_signal) {
            p = label == Label::malware ? spec.p_malware : spec.p_benign;
          }
          if (rng.bernoulli(p)) s.present_features.push_back(f.id);
        }
        c.samples.push_back(std::move(s));
      }
    }
  }
  return c;
}

}  // namespace malaudit
