// BI-RADS lesion descriptor vocabulary and binary lesion encoding.
#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepbirads/tensor.hpp"

namespace deepbirads {

enum class DescriptorCategory { MassMargin, MassShape, CalcMorphology, CalcDistribution };

inline std::string_view category_name(DescriptorCategory c) {
  switch (c) {
    case DescriptorCategory::MassMargin: return "mass-margin";
    case DescriptorCategory::MassShape: return "mass-shape";
    case DescriptorCategory::CalcMorphology: return "calc-morphology";
    case DescriptorCategory::CalcDistribution: return "calc-distribution";
  }
  return "unknown";
}

inline DescriptorCategory parse_category(std::string_view s) {
  for (auto c : {DescriptorCategory::MassMargin, DescriptorCategory::MassShape, DescriptorCategory::CalcMorphology,
                 DescriptorCategory::CalcDistribution})
    if (category_name(c) == s) return c;
  throw ValidationError("unknown descriptor category '" + std::string(s) + "'");
}

/// Trimmed, lower-cased form used for all token comparisons.
inline std::string fold_token(std::string_view s) {
  auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) return {};
  auto end = s.find_last_not_of(" \t\r\n");
  std::string out(s.substr(begin, end - begin + 1));
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

struct DescriptorClass {
  DescriptorCategory category;
  std::string token;
};

/// Ordered descriptor classes; index i (0-based here) is the position in the
/// list. Tokens are matched case-insensitively across all categories.
class DescriptorVocabulary {
 public:
  DescriptorVocabulary() = default;

  static DescriptorVocabulary build(std::vector<DescriptorClass> classes) {
    if (classes.empty()) throw ValidationError("descriptor vocabulary must be non-empty");
    DescriptorVocabulary v;
    for (std::size_t i = 0; i < classes.size(); ++i) {
      auto key = fold_token(classes[i].token);
      if (key.empty()) throw ValidationError("empty descriptor token at position " + std::to_string(i));
      for (std::size_t j = 0; j < i; ++j)
        if (classes[j].category == classes[i].category && fold_token(classes[j].token) == key)
          throw ValidationError("duplicate descriptor '" + classes[i].token + "' in category " +
                                std::string(category_name(classes[i].category)));
      // First occurrence wins when the same token appears in two categories.
      v.index_.emplace(std::move(key), i);
    }
    v.classes_ = std::move(classes);
    return v;
  }

  /// The fourteen mass and calcification classes found in CBIS-DDSM.
  static DescriptorVocabulary standard() {
    using C = DescriptorCategory;
    return build({{C::MassMargin, "Circumscribed"},   {C::MassMargin, "Ill-defined"},
                  {C::MassMargin, "Spicular"},        {C::MassMargin, "Obscured"},
                  {C::MassShape, "Round"},            {C::MassShape, "Oval"},
                  {C::MassShape, "Irregular"},        {C::CalcMorphology, "Pleomorphic"},
                  {C::CalcMorphology, "Amorphous"},   {C::CalcMorphology, "Linear"},
                  {C::CalcMorphology, "Punctate"},    {C::CalcDistribution, "Clustered"},
                  {C::CalcDistribution, "Scattered"}, {C::CalcDistribution, "Diffuse"}});
  }

  /// The seven mass classes (margin and shape) of the standard vocabulary.
  static DescriptorVocabulary mass_only() {
    auto all = standard().classes();
    all.resize(7);
    return build(std::move(all));
  }

  std::size_t size() const { return classes_.size(); }
  const std::vector<DescriptorClass>& classes() const { return classes_; }
  const DescriptorClass& at(std::size_t i) const { return classes_.at(i); }

  std::optional<std::size_t> find(std::string_view token) const {
    auto it = index_.find(fold_token(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index_of(std::string_view token) const {
    if (auto i = find(token)) return *i;
    throw ValidationError("unknown descriptor token '" + std::string(token) + "'");
  }

  /// One `category,token` line per class, in index order.
  std::string serialize() const {
    std::ostringstream os;
    for (const auto& c : classes_) os << category_name(c.category) << ',' << c.token << '\n';
    return os.str();
  }

  static DescriptorVocabulary parse(std::string_view text) {
    std::vector<DescriptorClass> classes;
    std::size_t line_no = 0;
    std::istringstream is{std::string(text)};
    for (std::string line; std::getline(is, line);) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (fold_token(line).empty()) continue;
      auto comma = line.find(',');
      if (comma == std::string::npos)
        throw ValidationError("vocabulary line " + std::to_string(line_no) + ": expected 'category,token'");
      classes.push_back({parse_category(fold_token(line.substr(0, comma))), line.substr(comma + 1)});
      auto& tok = classes.back().token;
      tok = tok.substr(0, tok.find_last_not_of(" \t") + 1);
      tok.erase(0, tok.find_first_not_of(" \t"));
    }
    return build(std::move(classes));
  }

  static DescriptorVocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open vocabulary file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

 private:
  std::vector<DescriptorClass> classes_;
  std::map<std::string, std::size_t> index_;
};

inline constexpr std::size_t kDefaultDescriptorLength = 256;

/// Binary lesion encoding of length L.
struct DescriptorVector {
  std::vector<double> values;

  std::size_t length() const { return values.size(); }
  bool operator==(const DescriptorVector&) const = default;
};

struct LesionDescriptorSet {
  std::vector<DescriptorVector> lesions;

  std::size_t count() const { return lesions.size(); }
  std::size_t length() const { return lesions.empty() ? 0 : lesions.front().length(); }

  /// Stacks the lesions into a [K x L] key/value matrix.
  Tensor as_tensor() const {
    if (lesions.empty()) throw ValidationError("lesion descriptor set is empty");
    std::vector<double> flat;
    flat.reserve(count() * length());
    for (const auto& l : lesions) {
      if (l.length() != length()) throw ValidationError("lesion descriptor vectors differ in length");
      flat.insert(flat.end(), l.values.begin(), l.values.end());
    }
    return Tensor::matrix(count(), length(), std::move(flat));
  }

  /// The descriptor-excluded input: a single all-zero vector.
  static LesionDescriptorSet blank(std::size_t length) {
    return LesionDescriptorSet{{DescriptorVector{std::vector<double>(length, 0.0)}}};
  }
};

/// Sets bit i for every class named in `tokens`. Combined classes such as
/// "Circumscribed-Obscured" contribute each of their parts.
inline DescriptorVector encode_lesion(const std::vector<std::string>& tokens, const DescriptorVocabulary& vocab,
                                      std::size_t length) {
  if (length < vocab.size())
    throw ConfigError("descriptor length " + std::to_string(length) + " is shorter than the vocabulary (" +
                      std::to_string(vocab.size()) + ")");
  DescriptorVector out{std::vector<double>(length, 0.0)};
  for (const auto& token : tokens) {
    // "Ill-defined" is a single class even though it contains a hyphen.
    if (auto whole = vocab.find(token)) {
      out.values[*whole] = 1.0;
      continue;
    }
    std::string_view rest = token;
    bool any = false;
    while (true) {
      auto dash = rest.find('-');
      auto part = rest.substr(0, dash);
      if (!fold_token(part).empty()) {
        auto idx = vocab.find(part);
        // Greedily absorb the next piece when the pair is itself a class.
        if (!idx && dash != std::string_view::npos) {
          auto next = rest.find('-', dash + 1);
          auto joined = rest.substr(0, next);
          if (auto j = vocab.find(joined)) {
            idx = j;
            dash = next;
          }
        }
        if (!idx) throw ValidationError("unknown descriptor token '" + std::string(part) + "' in '" + token + "'");
        out.values[*idx] = 1.0;
        any = true;
      }
      if (dash == std::string_view::npos) break;
      rest = rest.substr(dash + 1);
    }
    if (!any) throw ValidationError("empty descriptor token '" + token + "'");
  }
  return out;
}

inline LesionDescriptorSet encode_case(const std::vector<std::vector<std::string>>& lesions,
                                       const DescriptorVocabulary& vocab, std::size_t length) {
  if (lesions.empty()) throw ValidationError("a case needs at least one lesion");
  LesionDescriptorSet set;
  set.lesions.reserve(lesions.size());
  for (const auto& l : lesions) set.lesions.push_back(encode_lesion(l, vocab, length));
  return set;
}

/// Tokens whose bits are set, in index order.
inline std::vector<std::string> decode_lesion(const DescriptorVector& v, const DescriptorVocabulary& vocab) {
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < v.length(); ++i) {
    if (v.values[i] == 0.0) continue;
    if (i >= vocab.size()) throw ValidationError("descriptor bit " + std::to_string(i) + " beyond vocabulary");
    tokens.push_back(vocab.at(i).token);
  }
  return tokens;
}

}  // namespace deepbirads
