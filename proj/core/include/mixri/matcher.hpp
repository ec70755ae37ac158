#pragma once

#include <string>
#include <vector>

#include "mixri/image.hpp"
#include "mixri/ops.hpp"
#include "mixri/rng.hpp"
#include "mixri/tensor.hpp"

namespace mixri {

struct MatcherConfig {
  int feature_dim = 256;  // D
  int heads = 4;
  int n0 = 4, n1 = 2, n2 = 2, n3 = 2;  // outer, SAP, SAF, MARQ iteration counts
  double tau_occ = 0.8;
  double huber_delta = 0.0357;
  double loss_weight = 100.0;  // lambda
  std::vector<int> encoder_channels = {32, 64};  // 3 -> c0 -> c1 -> D, one stride-2 stage each
  int softargmax_radius = 2;  // feature-grid cells
  int image_size = 224;
  int stride = 8;  // fixed; H' = H/8
  bool use_sap = true;
  bool use_marq = true;
  Dtype dtype = Dtype::Float32;
  uint64_t init_seed = 1;

  int grid_size() const { return image_size / stride; }
  void validate() const;
  std::string to_json() const;
  static MatcherConfig from_json(const std::string& text);
  uint64_t hash() const;
};

/// Named parameters in creation order; the order fixes initialization and
/// checkpoint layout.
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor add(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    items.emplace_back(name, t);
    return t;
  }
  Tensor* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
};

struct MatchPrediction {
  Tensor heatmaps;  // [N,H',W'], each sums to 1
  Tensor coords;    // [N,2] normalized to [-1,1]
  Tensor occ_prob;  // [N] in [0,1]
};

struct MatcherInput {
  Tensor images;                                // [S+1,3,H,W]; index 0 is the query
  int n_points = 0;                             // N
  std::vector<std::array<double, 2>> ref_coords;  // S*N pixel coords, frame-major
  std::vector<uint8_t> ref_occ;                   // S*N occlusion flags, frame-major
};

struct QueryTruthTensors {
  Tensor occ;     // [N] 0/1
  Tensor coords;  // [N,2] normalized; (-1,-1) sentinel where occluded
  Tensor visible; // [N] indicator 1{occ_gt = 0}
};

struct LossParts {
  Tensor total, occ, loc;  // scalars; total = occ + loc
};

/// The view-aggregated point matching network.
class Matcher {
 public:
  explicit Matcher(const MatcherConfig& cfg);

  const MatcherConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// [B,3,H,W] -> [B,D,H/8,W/8]; weights shared across query and references.
  Tensor encode(const Tensor& images);

  /// Bilinear token retrieval from one feature map at input-scale pixel coords.
  Tensor retrieve_tokens(const Tensor& feature_map,
                         const std::vector<std::array<double, 2>>& pixel_coords);

  struct MixResult {
    Tensor fused;   // [N,D]
    Tensor query;   // [H'W',D]
  };
  /// Dual-attention mixer over tokens [S,N,D] with occlusion mask occ[S*N]
  /// and the query feature map f0 [H'W',D]. Occluded tokens are masked out as
  /// attention keys everywhere; block weights are shared across iterations.
  MixResult mix_features(const Tensor& tokens, const std::vector<uint8_t>& occ,
                         const std::vector<std::array<double, 2>>& coords, const Tensor& f0);

  /// C[h,w,k] = <query[h,w], fused[k]> / sqrt(D), shaped [H',W',N].
  Tensor build_cost_volume(const Tensor& fused, const Tensor& query) const;

  MatchPrediction predict_heads(const Tensor& cost_volume);

  MatchPrediction forward(const MatcherInput& input);

  LossParts loss(const MatchPrediction& pred, const QueryTruthTensors& truth) const;

 private:
  struct AttnBlock {
    Tensor ln_q_g, ln_q_b, ln_kv_g, ln_kv_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln_f_g, ln_f_b, w1, b1, w2, b2;
  };

  Tensor conv_param(const std::string& name, const Shape& shape, Rng& rng);
  Tensor zeros_param(const std::string& name, const Shape& shape);
  Tensor ones_param(const std::string& name, const Shape& shape);
  AttnBlock make_block(const std::string& prefix, Rng& rng);

  Tensor attn_layer(const AttnBlock& blk, const Tensor& x, const Tensor& src,
                    const std::optional<Tensor>& mask);
  Tensor resblock(const Tensor& x, const std::string& prefix);
  Tensor positional_encoding(const std::vector<std::array<double, 2>>& coords, int S, int N) const;

  MatcherConfig cfg_;
  ParamStore params_;
  AttnBlock sap_, saf_, marq_self_ref_, marq_self_query_, marq_cross_ref_, marq_cross_query_;
  Tensor fused_init_;  // [1,D] learnable token
};

/// Converts images to the matcher's input dtype, CHW-packed.
Tensor images_to_tensor(const std::vector<const ImageRGB*>& images, Dtype dt);

}  // namespace mixri
