#pragma once

// Prefix-blocking masks: which prefix keys each query token may bind with.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "dpt/errors.hpp"
#include "dpt/tensor.hpp"

namespace dpt {

enum class AttentionDesign { Dense, UniBlock, HierBlock, TruncSA, SoftSA, HTruncSA, HSoftSA, HierBlockSoftSA };

inline const char* to_string(AttentionDesign d) {
  switch (d) {
    case AttentionDesign::Dense: return "dense";
    case AttentionDesign::UniBlock: return "uniblock";
    case AttentionDesign::HierBlock: return "hierblock";
    case AttentionDesign::TruncSA: return "truncsa";
    case AttentionDesign::SoftSA: return "softsa";
    case AttentionDesign::HTruncSA: return "htruncsa";
    case AttentionDesign::HSoftSA: return "hsoftsa";
    case AttentionDesign::HierBlockSoftSA: return "hierblock+softsa";
  }
  return "?";
}

inline AttentionDesign parse_design(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
  for (auto d : {AttentionDesign::Dense, AttentionDesign::UniBlock, AttentionDesign::HierBlock, AttentionDesign::TruncSA,
                 AttentionDesign::SoftSA, AttentionDesign::HTruncSA, AttentionDesign::HSoftSA,
                 AttentionDesign::HierBlockSoftSA})
    if (name == to_string(d)) return d;
  if (name == "hierblocksoftsa" || name == "hierblock_softsa") return AttentionDesign::HierBlockSoftSA;
  throw ConfigError("unknown attention design '" + name + "'");
}

inline bool uses_blocking(AttentionDesign d) {
  return d == AttentionDesign::UniBlock || d == AttentionDesign::HierBlock || d == AttentionDesign::HierBlockSoftSA;
}

// Lower band of a stack: ceil(7 n / 12), the 7-of-12 split scaled to n layers.
inline int default_lower_band(int n_layers) { return (7 * n_layers + 11) / 12; }

struct BlockSpec {
  int enc_segments = 1;
  int dec_segments = 1;
  // Layers 1..lower_band_layers form the lower band; negative selects
  // default_lower_band() for the stack in question.
  int lower_band_layers = -1;

  int band_for(int n_layers) const { return lower_band_layers < 0 ? default_lower_band(n_layers) : lower_band_layers; }

  void validate(int n_layers) const {
    if (enc_segments < 1 || dec_segments < 1) throw ConfigError("segment counts must be >= 1");
    if (band_for(n_layers) > n_layers)
      throw ConfigError("lower band of " + std::to_string(band_for(n_layers)) + " layers exceeds stack of " +
                        std::to_string(n_layers));
  }
};

struct PrefixRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t p) const { return p >= begin && p < end; }
  bool operator==(const PrefixRange&) const = default;
};

// Splits [0, P) into `segments` contiguous ranges whose sizes differ by at
// most one, larger ranges first.
inline std::vector<PrefixRange> allocate_prefixes(std::size_t prefix_len, std::size_t segments) {
  if (segments == 0) throw ConfigError("allocate_prefixes: need at least one segment");
  if (prefix_len < segments)
    throw ConfigError("prefix length " + std::to_string(prefix_len) + " cannot cover " + std::to_string(segments) +
                      " segments");
  std::vector<PrefixRange> out;
  const std::size_t base = prefix_len / segments, extra = prefix_len % segments;
  std::size_t at = 0;
  for (std::size_t s = 0; s < segments; ++s) {
    const std::size_t len = base + (s < extra ? 1 : 0);
    out.push_back({at, at + len});
    at += len;
  }
  return out;
}

// Token position -> segment id; ids start at 0 and are non-decreasing.
class SegmentMap {
 public:
  SegmentMap() = default;
  explicit SegmentMap(std::vector<int> ids) : ids_(std::move(ids)) {
    if (ids_.empty()) throw DimensionError("segment map over zero tokens");
    if (ids_.front() != 0) throw InputError("segment map must start at segment 0");
    for (std::size_t t = 1; t < ids_.size(); ++t)
      if (ids_[t] != ids_[t - 1] && ids_[t] != ids_[t - 1] + 1)
        throw InputError("segment ids must be contiguous and non-decreasing");
  }

  // Equal-length contiguous spans, longer spans first.
  static SegmentMap equal_spans(std::size_t length, std::size_t segments) {
    if (segments == 0 || length == 0) throw DimensionError("equal_spans: empty split");
    const std::size_t used = std::min(segments, length);
    std::vector<int> ids;
    const std::size_t base = length / used, extra = length % used;
    for (std::size_t s = 0; s < used; ++s)
      ids.insert(ids.end(), base + (s < extra ? 1 : 0), static_cast<int>(s));
    return SegmentMap(std::move(ids));
  }

  // `starts` lists the first token of every segment (starts[0] == 0).
  static SegmentMap from_starts(std::size_t length, const std::vector<std::size_t>& starts) {
    if (starts.empty() || starts.front() != 0) throw InputError("segment starts must begin at 0");
    std::vector<int> ids(length, 0);
    for (std::size_t s = 0; s < starts.size(); ++s) {
      if (s > 0 && starts[s] <= starts[s - 1]) throw InputError("segment starts must be strictly increasing");
      if (starts[s] >= length) throw InputError("segment start beyond sequence end");
      const std::size_t end = s + 1 < starts.size() ? starts[s + 1] : length;
      std::fill(ids.begin() + static_cast<std::ptrdiff_t>(starts[s]), ids.begin() + static_cast<std::ptrdiff_t>(end),
                static_cast<int>(s));
    }
    return SegmentMap(std::move(ids));
  }

  // Position t of a sequence whose segments are laid out over a fixed
  // reference length; positions beyond it stay in the last segment. Used
  // for decoder positions, whose final length is unknown while decoding.
  static SegmentMap over_reference(std::size_t length, std::size_t reference_len, std::size_t segments) {
    if (segments == 0 || reference_len == 0 || length == 0) throw DimensionError("over_reference: empty split");
    const std::size_t used = std::min(segments, reference_len);
    std::vector<int> ids(length);
    for (std::size_t t = 0; t < length; ++t) ids[t] = static_cast<int>(std::min(used - 1, t * used / reference_len));
    return SegmentMap(std::move(ids));
  }

  std::size_t size() const { return ids_.size(); }
  int operator[](std::size_t t) const { return ids_[t]; }
  int segments() const { return ids_.empty() ? 0 : ids_.back() + 1; }
  const std::vector<int>& ids() const { return ids_; }

 private:
  std::vector<int> ids_;
};

// Mask over (query x (prefix keys + input keys)); 1 = visible, 0 = blocked.
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t prefix = 0;
  std::size_t inputs = 0;
  int layer = 0;
  std::vector<double> cells;

  AttentionMask() = default;
  AttentionMask(std::size_t q, std::size_t p, std::size_t k, double fill = 1.0, int layer_index = 0)
      : queries(q), prefix(p), inputs(k), layer(layer_index), cells(q * (p + k), fill) {}

  std::size_t cols() const { return prefix + inputs; }
  double at(std::size_t t, std::size_t c) const { return cells[t * cols() + c]; }
  double& at(std::size_t t, std::size_t c) { return cells[t * cols() + c]; }
  Tensor to_tensor() const { return Tensor({queries, cols()}, cells); }
  double row_sum(std::size_t t) const {
    double s = 0.0;
    for (std::size_t c = 0; c < cols(); ++c) s += at(t, c);
    return s;
  }
  bool operator==(const AttentionMask& o) const {
    return queries == o.queries && prefix == o.prefix && inputs == o.inputs && cells == o.cells;
  }
};

// Hides input key j from query t when j > t (decoder self-attention); prefix
// columns are untouched.
inline void apply_causal(AttentionMask& mask) {
  for (std::size_t t = 0; t < mask.queries; ++t)
    for (std::size_t j = t + 1; j < mask.inputs; ++j) mask.at(t, mask.prefix + j) = 0.0;
}

inline AttentionMask dense_mask(std::size_t queries, std::size_t prefix, std::size_t inputs, int layer = 0) {
  return AttentionMask(queries, prefix, inputs, 1.0, layer);
}

// Query t sees every input key but only the prefixes allocated to its
// segment. `inputs` defaults to the query count (self-attention).
inline AttentionMask uniform_block_mask(const SegmentMap& seg_map, const std::vector<PrefixRange>& alloc,
                                        std::size_t prefix, std::size_t inputs = 0, int layer = 0) {
  if (inputs == 0) inputs = seg_map.size();
  std::size_t covered = 0;
  for (std::size_t i = 0; i < alloc.size(); ++i) {
    if (alloc[i].begin != covered) throw ConfigError("prefix allocation is not contiguous");
    covered = alloc[i].end;
  }
  if (covered != prefix) throw ConfigError("prefix allocation does not cover all prefixes");
  if (static_cast<std::size_t>(seg_map.segments()) > alloc.size())
    throw ConfigError("more segments than prefix allocations");
  AttentionMask mask(seg_map.size(), prefix, inputs, 1.0, layer);
  for (std::size_t t = 0; t < seg_map.size(); ++t) {
    const PrefixRange& mine = alloc[static_cast<std::size_t>(seg_map[t])];
    for (std::size_t p = 0; p < prefix; ++p) mask.at(t, p) = mine.contains(p) ? 1.0 : 0.0;
  }
  return mask;
}

// Uniform blocking on layers 1..band, dense above. Layers are 1-based.
inline AttentionMask hierarchical_block_mask(int layer, int band, int n_layers, const SegmentMap& seg_map,
                                             const std::vector<PrefixRange>& alloc, std::size_t prefix,
                                             std::size_t inputs = 0) {
  if (layer < 1 || layer > n_layers)
    throw ConfigError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(n_layers) + "]");
  if (band < 0 || band > n_layers) throw ConfigError("lower band outside [0, n_layers]");
  if (inputs == 0) inputs = seg_map.size();
  if (layer <= band) return uniform_block_mask(seg_map, alloc, prefix, inputs, layer);
  return dense_mask(seg_map.size(), prefix, inputs, layer);
}

// Which layers of a stack carry prefixes.
struct LayerSchedule {
  enum class Mode { All, Top, Low, Single };
  Mode mode = Mode::All;
  int k = 0;
  std::vector<bool> selected;

  bool has(int layer) const { return layer >= 1 && static_cast<std::size_t>(layer) <= selected.size() && selected[layer - 1]; }
  int count() const { return static_cast<int>(std::count(selected.begin(), selected.end(), true)); }
};

inline LayerSchedule layer_subset_schedule(LayerSchedule::Mode mode, int k, int n_layers) {
  if (n_layers < 1) throw ConfigError("schedule over an empty stack");
  LayerSchedule s;
  s.mode = mode;
  s.k = k;
  s.selected.assign(static_cast<std::size_t>(n_layers), false);
  switch (mode) {
    case LayerSchedule::Mode::All:
      std::fill(s.selected.begin(), s.selected.end(), true);
      break;
    case LayerSchedule::Mode::Top:
      if (k < 1 || k > n_layers) throw ConfigError("top(" + std::to_string(k) + ") needs 1 <= k <= n_layers");
      for (int l = n_layers - k + 1; l <= n_layers; ++l) s.selected[l - 1] = true;
      break;
    case LayerSchedule::Mode::Low:
      if (k < 1 || k > n_layers) throw ConfigError("low(" + std::to_string(k) + ") needs 1 <= k <= n_layers");
      for (int l = 1; l <= k; ++l) s.selected[l - 1] = true;
      break;
    case LayerSchedule::Mode::Single:
      if (k < 1 || k > n_layers) throw ConfigError("single(" + std::to_string(k) + ") outside the stack");
      s.selected[k - 1] = true;
      break;
  }
  if (s.count() == 0) throw ConfigError("layer schedule selects no layers");
  return s;
}

// Textual form used by configs: "all", "top:5", "low:7", "single:12".
struct ScheduleSpec {
  LayerSchedule::Mode mode = LayerSchedule::Mode::All;
  int k = 0;

  static ScheduleSpec parse(const std::string& text) {
    ScheduleSpec s;
    const auto colon = text.find(':');
    const std::string head = text.substr(0, colon);
    if (head == "all") {
      s.mode = LayerSchedule::Mode::All;
      return s;
    }
    if (colon == std::string::npos) throw ConfigError("schedule '" + text + "' needs a layer count, e.g. top:5");
    if (head == "top") s.mode = LayerSchedule::Mode::Top;
    else if (head == "low") s.mode = LayerSchedule::Mode::Low;
    else if (head == "single") s.mode = LayerSchedule::Mode::Single;
    else throw ConfigError("unknown schedule '" + text + "'");
    try {
      s.k = std::stoi(text.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad layer count in schedule '" + text + "'");
    }
    return s;
  }

  std::string str() const {
    switch (mode) {
      case LayerSchedule::Mode::All: return "all";
      case LayerSchedule::Mode::Top: return "top:" + std::to_string(k);
      case LayerSchedule::Mode::Low: return "low:" + std::to_string(k);
      case LayerSchedule::Mode::Single: return "single:" + std::to_string(k);
    }
    return "all";
  }

  LayerSchedule resolve(int n_layers) const { return layer_subset_schedule(mode, k, n_layers); }
};

}  // namespace dpt
