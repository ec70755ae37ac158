#include "mixri/correspondence.hpp"

#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

#include "mixri/rng.hpp"

namespace mixri {

CorrespondenceSet sample_points(const std::vector<ReferenceView>& views, int M, uint64_t seed,
                                double tau, int erode_iterations) {
  const int S = static_cast<int>(views.size());
  if (S == 0 || M <= 0) throw std::invalid_argument("sample_points: need views and M > 0");
  Rng rng(seed);
  CorrespondenceSet cs;
  cs.points.reserve(static_cast<size_t>(S) * M);

  for (int i = 0; i < S; ++i) {
    const ReferenceView& view = views[static_cast<size_t>(i)];
    const MaskImage eroded = erode_mask(view.mask, erode_iterations);
    std::vector<std::pair<int, int>> pixels;
    for (int y = 0; y < eroded.height; ++y)
      for (int x = 0; x < eroded.width; ++x)
        if (eroded.at(x, y)) pixels.emplace_back(x, y);
    if (pixels.empty())
      throw std::runtime_error("sample_points: view " + std::to_string(i) +
                               " has an empty eroded mask");

    // unique draws when possible, cycle the drawn set otherwise
    std::vector<std::pair<int, int>> chosen;
    if (static_cast<int>(pixels.size()) >= M) {
      for (int m = 0; m < M; ++m) {
        const size_t j = m + static_cast<size_t>(rng.uniform_int(pixels.size() - m));
        std::swap(pixels[static_cast<size_t>(m)], pixels[j]);
        chosen.push_back(pixels[static_cast<size_t>(m)]);
      }
    } else {
      for (int m = 0; m < M; ++m) chosen.push_back(pixels[static_cast<size_t>(m) % pixels.size()]);
    }

    for (const auto& [x, y] : chosen) {
      const double d = view.depth.at(x, y);
      cs.points.push_back(unproject(Eigen::Vector2d(x, y), d, view.intrinsics, view.pose));
    }
  }

  const int N = cs.num_points();
  cs.observations.assign(static_cast<size_t>(N), std::vector<PointObservation>(static_cast<size_t>(S)));
  for (int k = 0; k < N; ++k)
    for (int j = 0; j < S; ++j)
      cs.observations[static_cast<size_t>(k)][static_cast<size_t>(j)] = occlusion_label(
          cs.points[static_cast<size_t>(k)], views[static_cast<size_t>(j)].depth,
          views[static_cast<size_t>(j)].intrinsics, views[static_cast<size_t>(j)].pose, tau, j);
  return cs;
}

CorrespondenceSet label_query(const CorrespondenceSet& cs, const ReferenceView& query, double tau) {
  CorrespondenceSet out = cs;
  const int N = cs.num_points();
  out.query_truth.assign(static_cast<size_t>(N), QueryTruth{});
  const double W = query.depth.width, H = query.depth.height;
  for (int k = 0; k < N; ++k) {
    const PointObservation obs = occlusion_label(cs.points[static_cast<size_t>(k)], query.depth,
                                                 query.intrinsics, query.pose, tau);
    QueryTruth& t = out.query_truth[static_cast<size_t>(k)];
    if (obs.occluded) continue;  // keeps the (-1,-1) sentinel
    t.occluded = false;
    t.coord = Eigen::Vector2d(2.0 * obs.pixel.x() / (W - 1.0) - 1.0,
                              2.0 * obs.pixel.y() / (H - 1.0) - 1.0);
  }
  return out;
}

namespace {

constexpr uint32_t kCorrMagic = 0x5243584d;  // "MXCR"
constexpr uint32_t kCorrVersion = 1;

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};

template <typename T>
void put(FILE* f, const T& v) {
  if (std::fwrite(&v, sizeof(T), 1, f) != 1) throw std::runtime_error("correspondence cache: short write");
}

template <typename T>
T get(FILE* f) {
  T v;
  if (std::fread(&v, sizeof(T), 1, f) != 1) throw std::runtime_error("correspondence cache: truncated");
  return v;
}

}  // namespace

void save_correspondences(const std::string& path, const CorrespondenceSet& cs, uint64_t seed,
                          uint64_t config_hash) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for writing: " + path);
  FILE* f = fp.get();
  put(f, kCorrMagic);
  put(f, kCorrVersion);
  put(f, static_cast<uint32_t>(cs.num_points()));
  put(f, static_cast<uint32_t>(cs.num_views()));
  put(f, seed);
  put(f, config_hash);
  for (const auto& p : cs.points) {
    put(f, p.x());
    put(f, p.y());
    put(f, p.z());
  }
  for (const auto& row : cs.observations)
    for (const auto& obs : row) {
      put(f, obs.pixel.x());
      put(f, obs.pixel.y());
      put(f, static_cast<uint8_t>(obs.occluded ? 1 : 0));
    }
}

CorrespondenceSet load_correspondences(const std::string& path, uint64_t* seed,
                                       uint64_t* config_hash) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open: " + path);
  FILE* f = fp.get();
  if (get<uint32_t>(f) != kCorrMagic)
    throw std::runtime_error("not a correspondence cache: " + path);
  if (get<uint32_t>(f) != kCorrVersion)
    throw std::runtime_error("unsupported correspondence cache version: " + path);
  const uint32_t N = get<uint32_t>(f);
  const uint32_t S = get<uint32_t>(f);
  const uint64_t s = get<uint64_t>(f);
  const uint64_t h = get<uint64_t>(f);
  if (seed) *seed = s;
  if (config_hash) *config_hash = h;

  CorrespondenceSet cs;
  cs.points.resize(N);
  for (auto& p : cs.points) {
    p.x() = get<double>(f);
    p.y() = get<double>(f);
    p.z() = get<double>(f);
  }
  cs.observations.assign(N, std::vector<PointObservation>(S));
  for (uint32_t k = 0; k < N; ++k)
    for (uint32_t j = 0; j < S; ++j) {
      PointObservation& obs = cs.observations[k][j];
      obs.view_index = static_cast<int>(j);
      obs.pixel.x() = get<double>(f);
      obs.pixel.y() = get<double>(f);
      obs.occluded = get<uint8_t>(f) != 0;
    }
  return cs;
}

}  // namespace mixri
