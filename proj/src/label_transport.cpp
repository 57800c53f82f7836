#include "regeval/label_transport.hpp"

#include <algorithm>

namespace regeval {

const char* to_string(TransportMode m) { return m == TransportMode::Probabilistic ? "prob" : "nearest"; }

TransportMode parse_transport_mode(const std::string& s) {
  if (s == "prob" || s == "probabilistic") return TransportMode::Probabilistic;
  if (s == "nearest") return TransportMode::Nearest;
  throw std::invalid_argument("unknown transport mode '" + s + "'");
}

void LabelTransportConfig::validate() const {
  if (!(background_probability_floor >= 0.0 && background_probability_floor < 1.0))
    throw std::invalid_argument("background_probability_floor must lie in [0, 1)");
}

LabelVolume warp_labels(const LabelVolume& lv, const LabelTransform& transform, const GridSpec& target,
                        const LabelTransportConfig& cfg) {
  cfg.validate();
  target.validate();
  transform.affine.validate();
  if (transform.field) transform.field->validate();
  const std::vector<Label> labels = label_set(lv);
  if (labels.empty()) throw std::invalid_argument("label volume has an empty label set");

  const PointMap map(target, lv.grid(), transform.affine, transform.field);
  if (cfg.mode == TransportMode::Nearest) return sample_through(lv, target, map, Interp::Nearest);

  const std::int64_t n = target.size();
  const Index3 d = target.dims;
  Image best_prob(target, 0.0);
  Image prob_sum(target, 0.0);
  LabelVolume out(target, 0);
  out.header().datatype = lv.header().datatype;
  out.header().description = lv.header().description;

  Volume<std::uint8_t> mask(lv.grid(), 0);
  for (Label l : labels) {
    for (std::int64_t v = 0; v < lv.size(); ++v) mask[v] = lv[v] == l ? 1 : 0;
    parallel_for(d[2], [&](std::int64_t k0, std::int64_t k1) {
      for (std::int64_t k = k0; k < k1; ++k)
        for (std::int64_t j = 0; j < d[1]; ++j)
          for (std::int64_t i = 0; i < d[0]; ++i) {
            const std::int64_t v = i + d[0] * (j + d[1] * k);
            const double p = sample_trilinear(mask, map(i, j, k), Border::Zero);
            prob_sum[v] += p;
            if (p > best_prob[v]) {
              best_prob[v] = p;
              out[v] = l;
            }
          }
    });
  }

  const double floor = cfg.background_probability_floor;
  parallel_for(n, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t v = b; v < e; ++v) {
      const double background = 1.0 - prob_sum[v];
      if (best_prob[v] <= floor || background > best_prob[v]) out[v] = 0;
    }
  });
  return out;
}

TransportComparison compare_transport_modes(const LabelVolume& lv, const LabelTransform& transform,
                                            const GridSpec& target) {
  TransportComparison cmp;
  cmp.probabilistic = warp_labels(lv, transform, target, {TransportMode::Probabilistic, 0.0});
  cmp.nearest = warp_labels(lv, transform, target, {TransportMode::Nearest, 0.0});

  const double in_voxel = std::abs(lv.grid().voxel_to_world.topLeftCorner<3, 3>().determinant());
  const double out_voxel = std::abs(target.voxel_to_world.topLeftCorner<3, 3>().determinant());

  std::map<Label, std::int64_t> in_count, prob_count, near_count, both_count;
  for (Label x : lv.data())
    if (x != 0) ++in_count[x];
  for (std::int64_t v = 0; v < cmp.probabilistic.size(); ++v) {
    const Label a = cmp.probabilistic[v], b = cmp.nearest[v];
    if (a != b) ++cmp.disagreement_voxels;
    if (a != 0) ++prob_count[a];
    if (b != 0) ++near_count[b];
    if (a != 0 && a == b) ++both_count[a];
  }
  for (const auto& [label, count] : in_count) {
    LabelModeComparison r;
    r.label = label;
    const auto pc = prob_count[label], nc = near_count[label];
    r.dice_between_modes = pc + nc == 0 ? 1.0 : 2.0 * static_cast<double>(both_count[label]) / double(pc + nc);
    r.input_volume_mm3 = static_cast<double>(count) * in_voxel;
    r.probabilistic_volume_mm3 = static_cast<double>(pc) * out_voxel;
    r.nearest_volume_mm3 = static_cast<double>(nc) * out_voxel;
    r.probabilistic_ratio = r.probabilistic_volume_mm3 / r.input_volume_mm3;
    r.nearest_ratio = r.nearest_volume_mm3 / r.input_volume_mm3;
    r.dropped_probabilistic = pc == 0;
    r.dropped_nearest = nc == 0;
    const auto off = [](double ratio) { return ratio < 0.5 || ratio > 1.5; };
    r.distorted = off(r.probabilistic_ratio) || off(r.nearest_ratio);
    cmp.per_label.push_back(r);
  }
  return cmp;
}

}  // namespace regeval
