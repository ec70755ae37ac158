#include "mixri/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace mixri {

AdamW::AdamW(ParamStore& params, const AdamWConfig& cfg) : params_(params), cfg_(cfg) {
  m_.resize(params_.items.size());
  v_.resize(params_.items.size());
  for (size_t i = 0; i < params_.items.size(); ++i) {
    m_[i].assign(static_cast<size_t>(params_.items[i].second.numel()), 0.0);
    v_[i].assign(static_cast<size_t>(params_.items[i].second.numel()), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_.items) t.zero_grad();
}

void AdamW::step() {
  ++t_;
  const double warm =
      cfg_.warmup_steps > 0 ? std::min(1.0, static_cast<double>(t_) / cfg_.warmup_steps) : 1.0;
  const double lr = cfg_.lr * warm;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.items.size(); ++i) {
    Tensor& p = params_.items[i].second;
    if (!p.has_grad()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (int64_t j = 0; j < p.numel(); ++j) {
      const double g = p.grad_at(j);
      m[static_cast<size_t>(j)] = cfg_.beta1 * m[static_cast<size_t>(j)] + (1.0 - cfg_.beta1) * g;
      v[static_cast<size_t>(j)] =
          cfg_.beta2 * v[static_cast<size_t>(j)] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[static_cast<size_t>(j)] / bc1;
      const double vhat = v[static_cast<size_t>(j)] / bc2;
      const double w = p.value_at(j);
      p.set_value(j, w - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w));
    }
  }
}

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

void AdamW::save_state(const std::string& path) const {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for writing: " + path);
  FILE* f = fp.get();
  const uint32_t magic = 0x4f43584d;  // "MXCO"
  const uint32_t version = 1;
  const uint32_t count = static_cast<uint32_t>(m_.size());
  std::fwrite(&magic, 4, 1, f);
  std::fwrite(&version, 4, 1, f);
  std::fwrite(&t_, 8, 1, f);
  std::fwrite(&count, 4, 1, f);
  for (size_t i = 0; i < m_.size(); ++i) {
    const uint64_t n = m_[i].size();
    std::fwrite(&n, 8, 1, f);
    std::fwrite(m_[i].data(), 8, m_[i].size(), f);
    std::fwrite(v_[i].data(), 8, v_[i].size(), f);
  }
}

void AdamW::load_state(const std::string& path) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open: " + path);
  FILE* f = fp.get();
  uint32_t magic = 0, version = 0, count = 0;
  if (std::fread(&magic, 4, 1, f) != 1 || magic != 0x4f43584d)
    throw std::runtime_error("not an optimizer state file: " + path);
  if (std::fread(&version, 4, 1, f) != 1 || version != 1)
    throw std::runtime_error("unsupported optimizer state version: " + path);
  if (std::fread(&t_, 8, 1, f) != 1) throw std::runtime_error("truncated optimizer state");
  if (std::fread(&count, 4, 1, f) != 1 || count != m_.size())
    throw std::runtime_error("optimizer state does not match the parameter set");
  for (size_t i = 0; i < m_.size(); ++i) {
    uint64_t n = 0;
    if (std::fread(&n, 8, 1, f) != 1 || n != m_[i].size())
      throw std::runtime_error("optimizer state size mismatch");
    if (std::fread(m_[i].data(), 8, n, f) != n || std::fread(v_[i].data(), 8, n, f) != n)
      throw std::runtime_error("truncated optimizer state");
  }
}

// ---------------------------------------------------------------------------

QuerySample make_query_sample(const ObjectAssets& assets, int render_size, int out_size,
                              double dist_min, double dist_max, bool with_clutter,
                              const ClutterConfig& clutter, const PhotometricConfig& photometric,
                              uint64_t seed) {
  const double radius = bank_camera_radius(assets.mesh);
  const Intrinsics render_K = default_intrinsics(render_size);
  const ClutterConfig none{0, 0.0};

  for (int attempt = 0; attempt < 32; ++attempt) {
    Rng rng(seed ^ (0x51554552ULL + static_cast<uint64_t>(attempt) * 0x9e3779b97f4a7c15ULL));
    // uniform viewing direction, jittered distance, free roll
    Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
    while (dir.norm() < 1e-6) dir = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    const double dist = radius * rng.uniform(dist_min, dist_max);
    Pose pose = look_at(dir * dist, Eigen::Vector3d::Zero(), Eigen::Vector3d(0, 0, 1));
    const double roll = rng.uniform(0.0, 2.0 * M_PI);
    Eigen::Matrix3d rz = Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    pose.R = rz * pose.R;
    pose.t = rz * pose.t;

    QueryRender qr = render_query(assets.mesh, pose, render_K, render_size, render_size,
                                  with_clutter ? clutter : none, photometric, rng.next_u64());
    if (!qr.usable) continue;
    ReferenceView cropped = crop_and_resize(qr.view, out_size);
    if (cropped.mask.count() == 0) continue;
    QuerySample sample;
    sample.labeled = label_query(assets.corrs, cropped);
    sample.view = std::move(cropped);
    sample.raw = std::move(qr.view);
    return sample;
  }
  throw std::runtime_error("make_query_sample: could not draw a usable query in 32 attempts");
}

MatcherInput build_matcher_input(const Matcher& matcher, const ObjectAssets& assets,
                                 const ImageRGB& query_rgb) {
  const int S = static_cast<int>(assets.refs.size());
  const int N = assets.corrs.num_points();
  MatcherInput in;
  in.n_points = N;
  std::vector<const ImageRGB*> images;
  images.push_back(&query_rgb);
  for (const auto& v : assets.refs) images.push_back(&v.rgb);
  in.images = images_to_tensor(images, matcher.config().dtype);
  in.ref_coords.resize(static_cast<size_t>(S) * N);
  in.ref_occ.resize(static_cast<size_t>(S) * N);
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < N; ++k) {
      const PointObservation& obs =
          assets.corrs.observations[static_cast<size_t>(k)][static_cast<size_t>(s)];
      in.ref_coords[static_cast<size_t>(s) * N + k] = {obs.pixel.x(), obs.pixel.y()};
      in.ref_occ[static_cast<size_t>(s) * N + k] = obs.occluded ? 1 : 0;
    }
  return in;
}

QueryTruthTensors truth_to_tensors(const CorrespondenceSet& labeled, Dtype dt) {
  const int N = labeled.num_points();
  if (static_cast<int>(labeled.query_truth.size()) != N)
    throw std::invalid_argument("truth_to_tensors: query labels missing");
  QueryTruthTensors t;
  t.occ = Tensor::zeros({N}, dt);
  t.coords = Tensor::zeros({N, 2}, dt);
  t.visible = Tensor::zeros({N}, dt);
  for (int k = 0; k < N; ++k) {
    const QueryTruth& q = labeled.query_truth[static_cast<size_t>(k)];
    t.occ.set_value(k, q.occluded ? 1.0 : 0.0);
    t.coords.set_value(2 * k, q.coord.x());
    t.coords.set_value(2 * k + 1, q.coord.y());
    t.visible.set_value(k, q.occluded ? 0.0 : 1.0);
  }
  return t;
}

Trainer::Trainer(const TrainConfig& cfg, std::vector<ObjectAssets> objects, Matcher& matcher)
    : cfg_(cfg), objects_(std::move(objects)), matcher_(matcher) {
  if (objects_.empty()) throw std::invalid_argument("trainer: no objects");
  for (const auto& o : objects_)
    if (o.corrs.num_points() == 0) throw std::invalid_argument("trainer: object without correspondences");
}

std::vector<TrainCurvePoint> Trainer::run(
    int start_step, AdamW& optimizer,
    const std::function<void(int, const TrainCurvePoint&)>& on_log) {
  Rng root(cfg_.seed ^ 0x545241494eULL);
  std::vector<TrainCurvePoint> curve;

  for (int step = start_step; step < cfg_.steps; ++step) {
    Rng step_rng = root.fork(static_cast<uint64_t>(step));
    const size_t obj_idx = static_cast<size_t>(step_rng.uniform_int(objects_.size()));
    const ObjectAssets& obj = objects_[obj_idx];
    const bool with_clutter = step_rng.uniform() < cfg_.clutter_prob;

    const QuerySample sample = make_query_sample(
        obj, cfg_.render_size, cfg_.matcher.image_size, cfg_.dist_min, cfg_.dist_max, with_clutter,
        cfg_.clutter, cfg_.photometric, step_rng.next_u64());

    MatcherInput input = build_matcher_input(matcher_, obj, sample.view.rgb);
    const QueryTruthTensors truth = truth_to_tensors(sample.labeled, cfg_.matcher.dtype);

    optimizer.zero_grad();
    MatchPrediction pred = matcher_.forward(input);
    LossParts parts = matcher_.loss(pred, truth);
    const double total = parts.total.scalar_value();
    if (!std::isfinite(total))
      throw std::runtime_error("training diverged: non-finite loss at step " +
                               std::to_string(step) + " on object " + obj.object_id);
    backward(parts.total);
    optimizer.step();

    if (step % cfg_.log_every == 0 || step + 1 == cfg_.steps) {
      TrainCurvePoint pt{step, total, parts.occ.scalar_value(), parts.loc.scalar_value()};
      curve.push_back(pt);
      if (on_log) on_log(step, pt);
    }
  }
  return curve;
}

}  // namespace mixri
