#include "mixri/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace mixri {

namespace {

constexpr uint32_t kCkptMagic = 0x4b43584d;  // "MXCK"
constexpr uint32_t kCkptVersion = 1;

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};

template <typename T>
void put(FILE* f, const T& v) {
  if (std::fwrite(&v, sizeof(T), 1, f) != 1) throw std::runtime_error("checkpoint: short write");
}

template <typename T>
T get(FILE* f) {
  T v;
  if (std::fread(&v, sizeof(T), 1, f) != 1) throw std::runtime_error("checkpoint: truncated");
  return v;
}

void put_string(FILE* f, const std::string& s) {
  put(f, static_cast<uint32_t>(s.size()));
  if (!s.empty() && std::fwrite(s.data(), 1, s.size(), f) != s.size())
    throw std::runtime_error("checkpoint: short write");
}

std::string get_string(FILE* f) {
  const uint32_t n = get<uint32_t>(f);
  std::string s(n, '\0');
  if (n && std::fread(s.data(), 1, n, f) != n) throw std::runtime_error("checkpoint: truncated");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Matcher& matcher, uint64_t seed) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for writing: " + path);
  FILE* f = fp.get();
  put(f, kCkptMagic);
  put(f, kCkptVersion);
  put(f, seed);
  put(f, matcher.config().hash());
  put_string(f, matcher.config().to_json());
  put(f, static_cast<uint32_t>(matcher.params().items.size()));
  for (const auto& [name, t] : matcher.params().items) {
    put_string(f, name);
    put(f, static_cast<uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) put(f, static_cast<int64_t>(t.shape()[i]));
    put(f, static_cast<uint8_t>(t.dtype()));
    if (t.dtype() == Dtype::Float32) {
      if (std::fwrite(t.data<float>(), 4, t.numel(), f) != static_cast<size_t>(t.numel()))
        throw std::runtime_error("checkpoint: short write");
    } else {
      if (std::fwrite(t.data<double>(), 8, t.numel(), f) != static_cast<size_t>(t.numel()))
        throw std::runtime_error("checkpoint: short write");
    }
  }
}

std::unique_ptr<Matcher> load_checkpoint(const std::string& path, uint64_t* seed) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open: " + path);
  FILE* f = fp.get();
  if (get<uint32_t>(f) != kCkptMagic) throw std::runtime_error("not a checkpoint: " + path);
  if (get<uint32_t>(f) != kCkptVersion)
    throw std::runtime_error("unsupported checkpoint version: " + path);
  const uint64_t stored_seed = get<uint64_t>(f);
  if (seed) *seed = stored_seed;
  const uint64_t stored_hash = get<uint64_t>(f);
  const std::string config_json = get_string(f);
  MatcherConfig cfg = MatcherConfig::from_json(config_json);
  if (cfg.hash() != stored_hash)
    throw std::runtime_error("checkpoint config hash mismatch (corrupt or incompatible): " + path);

  auto matcher = std::make_unique<Matcher>(cfg);
  const uint32_t n_params = get<uint32_t>(f);
  if (n_params != matcher->params().items.size())
    throw std::runtime_error("checkpoint parameter count mismatch: " + path);
  for (uint32_t i = 0; i < n_params; ++i) {
    const std::string name = get_string(f);
    Tensor* t = matcher->params().find(name);
    if (!t) throw std::runtime_error("checkpoint holds unknown parameter " + name);
    const uint32_t ndim = get<uint32_t>(f);
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = get<int64_t>(f);
    if (shape != t->shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": stored " +
                               shape_str(shape) + " vs model " + shape_str(t->shape()));
    const Dtype dt = static_cast<Dtype>(get<uint8_t>(f));
    if (dt != t->dtype()) throw std::runtime_error("checkpoint dtype mismatch for " + name);
    if (dt == Dtype::Float32) {
      if (std::fread(t->data<float>(), 4, t->numel(), f) != static_cast<size_t>(t->numel()))
        throw std::runtime_error("checkpoint: truncated");
    } else {
      if (std::fread(t->data<double>(), 8, t->numel(), f) != static_cast<size_t>(t->numel()))
        throw std::runtime_error("checkpoint: truncated");
    }
  }
  return matcher;
}

}  // namespace mixri
