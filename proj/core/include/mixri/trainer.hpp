#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mixri/correspondence.hpp"
#include "mixri/matcher.hpp"
#include "mixri/scene.hpp"

namespace mixri {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  int warmup_steps = 200;  // linear warm-up
};

/// Decoupled-weight-decay Adam with linear warm-up. Moment state is kept in
/// 64-bit regardless of parameter dtype.
class AdamW {
 public:
  AdamW(ParamStore& params, const AdamWConfig& cfg);

  void zero_grad();
  void step();
  int64_t steps_taken() const { return t_; }

  void save_state(const std::string& path) const;
  void load_state(const std::string& path);

 private:
  ParamStore& params_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Everything the pipeline needs for one object.
struct ObjectAssets {
  std::string object_id;
  TriMesh mesh;
  std::vector<ReferenceView> refs;  // S selected reference views
  CorrespondenceSet corrs;          // sampled over refs, N = M*S
};

struct TrainConfig {
  MatcherConfig matcher;
  AdamWConfig optim;
  int steps = 20000;
  uint64_t seed = 0;
  int render_size = 96;  // pre-crop query render resolution
  double clutter_prob = 0.5;
  ClutterConfig clutter{1, 0.3};
  PhotometricConfig photometric{0.75, 1.25, 0.02};
  double dist_min = 0.85, dist_max = 1.3;  // camera distance factor vs bank radius
  int log_every = 50;
  int checkpoint_every = 2000;
};

struct TrainCurvePoint {
  int step;
  double total, occ, loc;
};

struct QuerySample {
  ReferenceView raw;   // full query render (the inference entry point)
  ReferenceView view;  // cropped to the matcher resolution; pose is ground truth
  CorrespondenceSet labeled;
};

/// Renders a random query pose for one object, applies clutter/photometric
/// augmentation under with_clutter, crops to out_size, labels the points.
QuerySample make_query_sample(const ObjectAssets& assets, int render_size, int out_size,
                              double dist_min, double dist_max, bool with_clutter,
                              const ClutterConfig& clutter, const PhotometricConfig& photometric,
                              uint64_t seed);

/// Assembles the matcher input for a query image plus the object's reference
/// stack (coordinates and occlusion flags from the correspondence grid).
MatcherInput build_matcher_input(const Matcher& matcher, const ObjectAssets& assets,
                                 const ImageRGB& query_rgb);

QueryTruthTensors truth_to_tensors(const CorrespondenceSet& labeled, Dtype dt);

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<ObjectAssets> objects, Matcher& matcher);

  /// Runs steps [start_step, cfg.steps); appends to the loss curve. Aborts
  /// with a diagnostic if the loss goes non-finite.
  std::vector<TrainCurvePoint> run(int start_step, AdamW& optimizer,
                                   const std::function<void(int, const TrainCurvePoint&)>& on_log);

  const TrainConfig& config() const { return cfg_; }

 private:
  TrainConfig cfg_;
  std::vector<ObjectAssets> objects_;
  Matcher& matcher_;
};

}  // namespace mixri
