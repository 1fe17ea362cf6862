// SPDX-License-Identifier: Apache-2.0
//
// The synthetic prompt language and the 2-D targets it describes.
//
// A prompt names one color and one shape; each attribute has three surface
// forms (a canonical form and two synonyms). The meaning of a prompt selects
// one of K = colors * shapes Gaussian components placed on a circle.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "promptrl/error.hpp"
#include "promptrl/rng.hpp"

namespace promptrl {

using TokenId = std::int32_t;
using Prompt = std::vector<TokenId>;

template <typename Real>
using Point = std::array<Real, 2>;

enum class Slot { Color, Shape };

inline constexpr int kNumVariants = 3;

struct ParaphraseRow {
  Slot slot = Slot::Color;
  int value = 0;  ///< color index or shape index
  std::array<std::string, kNumVariants> forms;  ///< forms[0] is canonical
};

/// Surface-form table; every form maps back to exactly one canonical row.
class ParaphraseTable {
 public:
  ParaphraseTable() = default;

  explicit ParaphraseTable(std::vector<ParaphraseRow> rows) : rows_(std::move(rows)) {
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      for (int v = 0; v < kNumVariants; ++v) {
        const auto& form = rows_[r].forms[static_cast<std::size_t>(v)];
        require(!form.empty(), ErrorCode::InvalidArgument, "empty surface form");
        const bool inserted = lookup_.emplace(form, std::pair{r, v}).second;
        require(inserted, ErrorCode::InvalidArgument, "surface form '" + form + "' is not unique");
      }
    }
    for (auto slot : {Slot::Color, Slot::Shape}) {
      const int count = num_values(slot);
      for (int value = 0; value < count; ++value) {
        require(row_of(slot, value).has_value(), ErrorCode::InvalidArgument, "attribute values must be dense");
      }
    }
  }

  static ParaphraseTable standard() {
    return ParaphraseTable({
        {Slot::Color, 0, {"red", "crimson", "scarlet"}},
        {Slot::Color, 1, {"blue", "azure", "navy"}},
        {Slot::Color, 2, {"green", "emerald", "jade"}},
        {Slot::Color, 3, {"yellow", "golden", "amber"}},
        {Slot::Shape, 0, {"ring", "loop", "hoop"}},
        {Slot::Shape, 1, {"square", "box", "block"}},
    });
  }

  const std::vector<ParaphraseRow>& rows() const { return rows_; }

  /// (row index, variant index) of a surface form.
  std::optional<std::pair<std::size_t, int>> find(const std::string& form) const {
    auto it = lookup_.find(form);
    if (it == lookup_.end()) {
      return std::nullopt;
    }
    return it->second;
  }

  std::optional<std::size_t> row_of(Slot slot, int value) const {
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      if (rows_[r].slot == slot && rows_[r].value == value) {
        return r;
      }
    }
    return std::nullopt;
  }

  int num_values(Slot slot) const {
    int count = 0;
    for (const auto& row : rows_) {
      count += row.slot == slot ? 1 : 0;
    }
    return count;
  }

 private:
  std::vector<ParaphraseRow> rows_;
  std::map<std::string, std::pair<std::size_t, int>> lookup_;
};

/// Token alphabet: structural specials, fillers, then every surface form.
class Vocab {
 public:
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kAnswerOpen = "<answer>";
  static constexpr const char* kAnswerClose = "</answer>";

  Vocab() = default;

  Vocab(const ParaphraseTable& table, const std::vector<std::string>& fillers) {
    add(kBos);
    add(kEos);
    add(kAnswerOpen);
    add(kAnswerClose);
    for (const auto& f : fillers) {
      filler_ids_.push_back(add(f));
    }
    for (const auto& row : table.rows()) {
      for (const auto& form : row.forms) {
        add(form);
      }
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorCode::IdOutOfRange,
            "token id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }
  std::optional<TokenId> id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? std::nullopt : std::optional<TokenId>(it->second);
  }

  TokenId bos() const { return 0; }
  TokenId eos() const { return 1; }
  TokenId answer_open() const { return 2; }
  TokenId answer_close() const { return 3; }
  const std::vector<TokenId>& fillers() const { return filler_ids_; }

  bool is_structural(TokenId id) const { return id >= 0 && id <= 3; }
  bool is_filler(TokenId id) const {
    for (TokenId f : filler_ids_) {
      if (f == id) {
        return true;
      }
    }
    return false;
  }
  bool is_special(TokenId id) const { return is_structural(id) || is_filler(id); }

  Prompt encode(const std::vector<std::string>& words) const {
    Prompt out;
    out.reserve(words.size());
    for (const auto& w : words) {
      auto found = id(w);
      require(found.has_value(), ErrorCode::UnknownToken, "'" + w + "'");
      out.push_back(*found);
    }
    return out;
  }

  std::vector<std::string> decode(const Prompt& prompt) const {
    std::vector<std::string> out;
    out.reserve(prompt.size());
    for (TokenId t : prompt) {
      out.push_back(token(t));
    }
    return out;
  }

  std::string to_text(const Prompt& prompt) const {
    std::string out;
    for (TokenId t : prompt) {
      if (!out.empty()) {
        out += ' ';
      }
      out += token(t);
    }
    return out;
  }

 private:
  TokenId add(const std::string& token) {
    require(!ids_.count(token), ErrorCode::InvalidArgument, "duplicate token '" + token + "'");
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
  }

  std::vector<std::string> tokens_;
  std::map<std::string, TokenId> ids_;
  std::vector<TokenId> filler_ids_;
};

struct Semantics {
  int color = 0;
  int shape = 0;

  friend bool operator==(const Semantics&, const Semantics&) = default;
};

/// Geometry of the target mixture.
struct WorldSpec {
  int num_colors = 4;
  int num_shapes = 2;
  double radius = 2.0;
  double component_std = 0.15;

  int num_components() const { return num_colors * num_shapes; }
  int component_index(const Semantics& s) const { return s.color * num_shapes + s.shape; }
  Semantics semantics_of(int component) const { return {component / num_shapes, component % num_shapes}; }

  Point<double> mean(int component) const {
    const double angle = 2.0 * std::numbers::pi * component / num_components();
    return {radius * std::cos(angle), radius * std::sin(angle)};
  }

  double min_pairwise_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < num_components(); ++j) {
      for (int k = j + 1; k < num_components(); ++k) {
        const auto a = mean(j);
        const auto b = mean(k);
        best = std::min(best, std::hypot(a[0] - b[0], a[1] - b[1]));
      }
    }
    return best;
  }

  void validate() const {
    require(num_colors >= 1 && num_shapes >= 1, ErrorCode::InvalidArgument, "need at least one color and shape");
    require(radius > 0.0 && component_std >= 0.0, ErrorCode::InvalidArgument, "radius > 0, std >= 0");
    if (num_components() > 1) {
      require(min_pairwise_distance() > 6.0 * component_std, ErrorCode::InvalidArgument,
              "components must be separated by more than 6 standard deviations");
    }
  }
};

inline const std::vector<std::string>& default_fillers() {
  static const std::vector<std::string> fillers{"a", "the", "very"};
  return fillers;
}

/// Everything immutable that defines the toy task.
struct World {
  WorldSpec spec;
  ParaphraseTable table;
  std::vector<std::string> fillers;
  Vocab vocab;

  World() : World(WorldSpec{}, ParaphraseTable::standard(), default_fillers()) {}

  World(WorldSpec s, ParaphraseTable t, std::vector<std::string> f)
      : spec(s), table(std::move(t)), fillers(std::move(f)), vocab(table, fillers) {
    spec.validate();
    require(table.num_values(Slot::Color) == spec.num_colors, ErrorCode::InvalidArgument,
            "paraphrase table color count differs from world");
    require(table.num_values(Slot::Shape) == spec.num_shapes, ErrorCode::InvalidArgument,
            "paraphrase table shape count differs from world");
  }

  int num_components() const { return spec.num_components(); }
};

inline Semantics canonicalize(const World& world, const Prompt& prompt) {
  std::optional<int> color;
  std::optional<int> shape;
  for (TokenId t : prompt) {
    if (world.vocab.is_filler(t)) {
      continue;
    }
    if (t < 0 || static_cast<std::size_t>(t) >= world.vocab.size() || world.vocab.is_structural(t)) {
      throw Error(ErrorCode::UnknownToken, "token id " + std::to_string(t) + " is not an attribute form");
    }
    const auto hit = world.table.find(world.vocab.token(t));
    require(hit.has_value(), ErrorCode::UnknownToken, world.vocab.token(t));
    const auto& row = world.table.rows()[hit->first];
    auto& slot = row.slot == Slot::Color ? color : shape;
    if (slot.has_value()) {
      throw Error(ErrorCode::DuplicateSlot, std::string(row.slot == Slot::Color ? "color" : "shape") +
                                                " given twice ('" + world.vocab.token(t) + "')");
    }
    slot = row.value;
  }
  if (!color) {
    throw Error(ErrorCode::MissingSlot, "no color form");
  }
  if (!shape) {
    throw Error(ErrorCode::MissingSlot, "no shape form");
  }
  return {*color, *shape};
}

inline std::optional<Semantics> try_canonicalize(const World& world, const Prompt& prompt) {
  try {
    return canonicalize(world, prompt);
  } catch (const Error&) {
    return std::nullopt;
  }
}

inline Prompt paraphrase(const World& world, const Prompt& prompt, int variant) {
  require(variant >= 0 && variant < kNumVariants, ErrorCode::InvalidArgument, "variant index must be 0, 1 or 2");
  canonicalize(world, prompt);
  Prompt out;
  out.reserve(prompt.size());
  for (TokenId t : prompt) {
    if (world.vocab.is_filler(t)) {
      out.push_back(t);
      continue;
    }
    const auto hit = world.table.find(world.vocab.token(t));
    const auto& form = world.table.rows()[hit->first].forms[static_cast<std::size_t>(variant)];
    out.push_back(*world.vocab.id(form));
  }
  return out;
}

/// Prompt "color shape" using the given surface variant for both slots.
/// Color form from variant `color_variant`, shape form from `shape_variant`.
inline Prompt make_prompt(const World& world, const Semantics& sem, int color_variant, int shape_variant) {
  require(color_variant >= 0 && color_variant < kNumVariants && shape_variant >= 0 && shape_variant < kNumVariants,
          ErrorCode::InvalidArgument, "variant index must be 0, 1 or 2");
  const auto& color_row = world.table.rows()[*world.table.row_of(Slot::Color, sem.color)];
  const auto& shape_row = world.table.rows()[*world.table.row_of(Slot::Shape, sem.shape)];
  return {*world.vocab.id(color_row.forms[static_cast<std::size_t>(color_variant)]),
          *world.vocab.id(shape_row.forms[static_cast<std::size_t>(shape_variant)])};
}

inline Prompt make_prompt(const World& world, const Semantics& sem, int variant) {
  return make_prompt(world, sem, variant, variant);
}

template <typename Real = double>
Point<Real> sample_target(const World& world, const Semantics& sem, RngStream& rng) {
  const auto mean = world.spec.mean(world.spec.component_index(sem));
  const double sd = world.spec.component_std;
  const double z0 = rng.normal();
  const double z1 = rng.normal();
  return {static_cast<Real>(mean[0] + sd * z0), static_cast<Real>(mean[1] + sd * z1)};
}

struct Splits {
  std::vector<Prompt> train;
  std::vector<Prompt> eval_original;
  std::vector<Prompt> eval_paraphrase;
};

/// Training prompts use canonical forms only (optionally with one leading
/// filler); the paraphrase split uses variants 1 and 2 of every meaning.
inline Splits build_splits(const World& world, RngStream& rng, bool train_fillers = true) {
  Splits splits;
  for (int k = 0; k < world.num_components(); ++k) {
    const Semantics sem = world.spec.semantics_of(k);
    Prompt base = make_prompt(world, sem, 0);
    splits.eval_original.push_back(base);
    Prompt train = base;
    if (train_fillers && !world.vocab.fillers().empty() && rng.bernoulli(0.5)) {
      const auto& f = world.vocab.fillers();
      train.insert(train.begin(), f[rng.uniform_int(f.size())]);
    }
    splits.train.push_back(std::move(train));
  }
  for (int k = 0; k < world.num_components(); ++k) {
    const Semantics sem = world.spec.semantics_of(k);
    for (int v = 1; v < kNumVariants; ++v) {
      splits.eval_paraphrase.push_back(make_prompt(world, sem, v));
    }
  }
  return splits;
}

// --- structured text serialization -------------------------------------------

inline nlohmann::ordered_json to_json(const World& world) {
  nlohmann::ordered_json j;
  j["num_colors"] = world.spec.num_colors;
  j["num_shapes"] = world.spec.num_shapes;
  j["radius"] = world.spec.radius;
  j["component_std"] = world.spec.component_std;
  j["fillers"] = world.fillers;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : world.table.rows()) {
    nlohmann::ordered_json r;
    r["slot"] = row.slot == Slot::Color ? "color" : "shape";
    r["value"] = row.value;
    r["forms"] = row.forms;
    rows.push_back(r);
  }
  j["table"] = rows;
  return j;
}

inline World world_from_json(const nlohmann::ordered_json& j) {
  WorldSpec spec;
  spec.num_colors = j.at("num_colors").get<int>();
  spec.num_shapes = j.at("num_shapes").get<int>();
  spec.radius = j.at("radius").get<double>();
  spec.component_std = j.at("component_std").get<double>();
  std::vector<ParaphraseRow> rows;
  for (const auto& r : j.at("table")) {
    ParaphraseRow row;
    const auto slot = r.at("slot").get<std::string>();
    require(slot == "color" || slot == "shape", ErrorCode::InvalidArgument, "slot must be color or shape");
    row.slot = slot == "color" ? Slot::Color : Slot::Shape;
    row.value = r.at("value").get<int>();
    row.forms = r.at("forms").get<std::array<std::string, kNumVariants>>();
    rows.push_back(std::move(row));
  }
  return World(spec, ParaphraseTable(std::move(rows)), j.at("fillers").get<std::vector<std::string>>());
}

}  // namespace promptrl
