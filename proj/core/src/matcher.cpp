#include "mixri/matcher.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;
namespace ops = mixri::ops;

namespace mixri {

void MatcherConfig::validate() const {
  if (feature_dim <= 0 || feature_dim % heads != 0)
    throw std::invalid_argument("matcher config: feature_dim must be a positive multiple of heads");
  if (feature_dim % 4 != 0)
    throw std::invalid_argument("matcher config: feature_dim must be divisible by 4 (2D sinusoidal encoding)");
  if (stride != 8) throw std::invalid_argument("matcher config: stride is fixed at 8");
  if (image_size % stride != 0)
    throw std::invalid_argument("matcher config: image_size must be divisible by 8");
  if (encoder_channels.size() != 2)
    throw std::invalid_argument("matcher config: encoder_channels must list two stage widths");
  if (n0 < 1 || n1 < 0 || n2 < 1 || n3 < 0)
    throw std::invalid_argument("matcher config: bad iteration counts");
  if (softargmax_radius < 0) throw std::invalid_argument("matcher config: negative soft-argmax radius");
  if (tau_occ < 0 || tau_occ > 1) throw std::invalid_argument("matcher config: tau_occ outside [0,1]");
}

std::string MatcherConfig::to_json() const {
  json j;
  j["feature_dim"] = feature_dim;
  j["heads"] = heads;
  j["n0"] = n0;
  j["n1"] = n1;
  j["n2"] = n2;
  j["n3"] = n3;
  j["tau_occ"] = tau_occ;
  j["huber_delta"] = huber_delta;
  j["loss_weight"] = loss_weight;
  j["encoder_channels"] = encoder_channels;
  j["softargmax_radius"] = softargmax_radius;
  j["image_size"] = image_size;
  j["stride"] = stride;
  j["use_sap"] = use_sap;
  j["use_marq"] = use_marq;
  j["dtype"] = dtype == Dtype::Float32 ? "f32" : "f64";
  j["init_seed"] = init_seed;
  return j.dump();
}

MatcherConfig MatcherConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  MatcherConfig c;
  c.feature_dim = j.at("feature_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.n0 = j.at("n0").get<int>();
  c.n1 = j.at("n1").get<int>();
  c.n2 = j.at("n2").get<int>();
  c.n3 = j.at("n3").get<int>();
  c.tau_occ = j.at("tau_occ").get<double>();
  c.huber_delta = j.at("huber_delta").get<double>();
  c.loss_weight = j.at("loss_weight").get<double>();
  c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
  c.softargmax_radius = j.at("softargmax_radius").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.stride = j.at("stride").get<int>();
  c.use_sap = j.at("use_sap").get<bool>();
  c.use_marq = j.at("use_marq").get<bool>();
  c.dtype = j.at("dtype").get<std::string>() == "f64" ? Dtype::Float64 : Dtype::Float32;
  c.init_seed = j.at("init_seed").get<uint64_t>();
  return c;
}

uint64_t MatcherConfig::hash() const { return fnv1a64_str(to_json()); }

// ---------------------------------------------------------------------------

Tensor Matcher::conv_param(const std::string& name, const Shape& shape, Rng& rng) {
  int64_t fan_in = 1;
  for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  return params_.add(name, ops::randn(shape, cfg_.dtype, rng, 0.0, std));
}

Tensor Matcher::zeros_param(const std::string& name, const Shape& shape) {
  return params_.add(name, Tensor::zeros(shape, cfg_.dtype));
}

Tensor Matcher::ones_param(const std::string& name, const Shape& shape) {
  return params_.add(name, Tensor::full(shape, 1.0, cfg_.dtype));
}

Matcher::AttnBlock Matcher::make_block(const std::string& p, Rng& rng) {
  const int64_t D = cfg_.feature_dim;
  AttnBlock b;
  b.ln_q_g = ones_param(p + ".ln_q.g", {D});
  b.ln_q_b = zeros_param(p + ".ln_q.b", {D});
  b.ln_kv_g = ones_param(p + ".ln_kv.g", {D});
  b.ln_kv_b = zeros_param(p + ".ln_kv.b", {D});
  b.wq = conv_param(p + ".wq", {D, D}, rng);
  b.bq = zeros_param(p + ".bq", {D});
  b.wk = conv_param(p + ".wk", {D, D}, rng);
  b.bk = zeros_param(p + ".bk", {D});
  b.wv = conv_param(p + ".wv", {D, D}, rng);
  b.bv = zeros_param(p + ".bv", {D});
  b.wo = conv_param(p + ".wo", {D, D}, rng);
  b.bo = zeros_param(p + ".bo", {D});
  b.ln_f_g = ones_param(p + ".ln_f.g", {D});
  b.ln_f_b = zeros_param(p + ".ln_f.b", {D});
  b.w1 = conv_param(p + ".ffn.w1", {D, 2 * D}, rng);
  b.b1 = zeros_param(p + ".ffn.b1", {2 * D});
  b.w2 = conv_param(p + ".ffn.w2", {2 * D, D}, rng);
  b.b2 = zeros_param(p + ".ffn.b2", {D});
  return b;
}

Matcher::Matcher(const MatcherConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.init_seed ^ 0x4d695852491ULL);
  const int64_t D = cfg_.feature_dim;
  const int64_t c0 = cfg_.encoder_channels[0], c1 = cfg_.encoder_channels[1];

  // encoder: three stride-2 stages, two residual blocks each
  conv_param("enc.s0.conv.w", {c0, 3, 3, 3}, rng);
  zeros_param("enc.s0.conv.b", {c0});
  for (int rb = 0; rb < 2; ++rb) {
    const std::string p = "enc.s0.res" + std::to_string(rb);
    conv_param(p + ".c1.w", {c0, c0, 3, 3}, rng);
    zeros_param(p + ".c1.b", {c0});
    conv_param(p + ".c2.w", {c0, c0, 3, 3}, rng);
    zeros_param(p + ".c2.b", {c0});
  }
  conv_param("enc.s1.conv.w", {c1, c0, 3, 3}, rng);
  zeros_param("enc.s1.conv.b", {c1});
  for (int rb = 0; rb < 2; ++rb) {
    const std::string p = "enc.s1.res" + std::to_string(rb);
    conv_param(p + ".c1.w", {c1, c1, 3, 3}, rng);
    zeros_param(p + ".c1.b", {c1});
    conv_param(p + ".c2.w", {c1, c1, 3, 3}, rng);
    zeros_param(p + ".c2.b", {c1});
  }
  conv_param("enc.s2.conv.w", {D, c1, 3, 3}, rng);
  zeros_param("enc.s2.conv.b", {D});
  for (int rb = 0; rb < 2; ++rb) {
    const std::string p = "enc.s2.res" + std::to_string(rb);
    conv_param(p + ".c1.w", {D, D, 3, 3}, rng);
    zeros_param(p + ".c1.b", {D});
    conv_param(p + ".c2.w", {D, D, 3, 3}, rng);
    zeros_param(p + ".c2.b", {D});
  }

  sap_ = make_block("mix.sap", rng);
  saf_ = make_block("mix.saf", rng);
  marq_self_ref_ = make_block("mix.marq.self_ref", rng);
  marq_self_query_ = make_block("mix.marq.self_query", rng);
  marq_cross_ref_ = make_block("mix.marq.cross_ref", rng);
  marq_cross_query_ = make_block("mix.marq.cross_query", rng);

  fused_init_ = params_.add("mix.fused_init", ops::randn({1, D}, cfg_.dtype, rng, 0.0, 0.02));

  // cost-volume trunk: Conv3D 1 -> 8 -> 8 -> 8, then the two heads
  conv_param("heads.t0.w", {8, 1, 3, 3, 3}, rng);
  zeros_param("heads.t0.b", {8});
  conv_param("heads.t1.w", {8, 8, 3, 3, 3}, rng);
  zeros_param("heads.t1.b", {8});
  conv_param("heads.t2.w", {8, 8, 3, 3, 3}, rng);
  zeros_param("heads.t2.b", {8});
  conv_param("heads.heat.w", {1, 8, 3, 3, 3}, rng);
  zeros_param("heads.heat.b", {1});
  conv_param("heads.occ.w", {8, 1}, rng);
  zeros_param("heads.occ.b", {1});
}

Tensor Matcher::resblock(const Tensor& x, const std::string& p) {
  Tensor h = ops::conv2d(x, *params_.find(p + ".c1.w"), *params_.find(p + ".c1.b"), 1, 1);
  h = ops::relu(h);
  h = ops::conv2d(h, *params_.find(p + ".c2.w"), *params_.find(p + ".c2.b"), 1, 1);
  return ops::relu(ops::add(x, h));
}

Tensor Matcher::encode(const Tensor& images) {
  if (images.ndim() != 4 || images.dim(1) != 3)
    throw std::invalid_argument("encode: expected [B,3,H,W], got " + shape_str(images.shape()));
  if (images.dim(2) % cfg_.stride != 0 || images.dim(3) % cfg_.stride != 0)
    throw std::invalid_argument("encode: image side must be divisible by " +
                                std::to_string(cfg_.stride));
  Tensor x = images;
  for (int stage = 0; stage < 3; ++stage) {
    const std::string p = "enc.s" + std::to_string(stage);
    x = ops::conv2d(x, *params_.find(p + ".conv.w"), *params_.find(p + ".conv.b"), 2, 1);
    x = ops::relu(x);
    x = resblock(x, p + ".res0");
    x = resblock(x, p + ".res1");
  }
  return x;
}

Tensor Matcher::retrieve_tokens(const Tensor& feature_map,
                                const std::vector<std::array<double, 2>>& pixel_coords) {
  std::vector<std::array<double, 2>> grid_coords(pixel_coords.size());
  for (size_t i = 0; i < pixel_coords.size(); ++i)
    grid_coords[i] = {pixel_coords[i][0] / cfg_.stride, pixel_coords[i][1] / cfg_.stride};
  return ops::bilinear_sample(feature_map, grid_coords);
}

Tensor Matcher::attn_layer(const AttnBlock& blk, const Tensor& x, const Tensor& src,
                           const std::optional<Tensor>& mask) {
  Tensor qn = ops::layer_norm(x, blk.ln_q_g, blk.ln_q_b);
  Tensor kn = ops::layer_norm(src, blk.ln_kv_g, blk.ln_kv_b);
  Tensor q = ops::add(ops::matmul(qn, blk.wq), blk.bq);
  Tensor k = ops::add(ops::matmul(kn, blk.wk), blk.bk);
  Tensor v = ops::add(ops::matmul(kn, blk.wv), blk.bv);
  Tensor msg = ops::multi_head_attention(q, k, v, mask, cfg_.heads);
  msg = ops::add(ops::matmul(msg, blk.wo), blk.bo);
  Tensor y = ops::add(x, msg);
  Tensor f = ops::layer_norm(y, blk.ln_f_g, blk.ln_f_b);
  f = ops::add(ops::matmul(f, blk.w1), blk.b1);
  f = ops::relu(f);
  f = ops::add(ops::matmul(f, blk.w2), blk.b2);
  return ops::add(y, f);
}

Tensor Matcher::positional_encoding(const std::vector<std::array<double, 2>>& coords, int S,
                                    int N) const {
  const int64_t D = cfg_.feature_dim;
  const int64_t quarter = D / 4;
  Tensor pe = Tensor::zeros({S, N, D}, cfg_.dtype);
  for (int i = 0; i < S * N; ++i) {
    const double x = coords[static_cast<size_t>(i)][0] / cfg_.stride;
    const double y = coords[static_cast<size_t>(i)][1] / cfg_.stride;
    for (int64_t q = 0; q < quarter; ++q) {
      const double omega =
          1.0 / std::pow(10000.0, static_cast<double>(q) / static_cast<double>(quarter));
      pe.set_value(i * D + 4 * q + 0, std::sin(x * omega));
      pe.set_value(i * D + 4 * q + 1, std::cos(x * omega));
      pe.set_value(i * D + 4 * q + 2, std::sin(y * omega));
      pe.set_value(i * D + 4 * q + 3, std::cos(y * omega));
    }
  }
  return pe;
}

Matcher::MixResult Matcher::mix_features(const Tensor& tokens, const std::vector<uint8_t>& occ,
                                         const std::vector<std::array<double, 2>>& coords,
                                         const Tensor& f0) {
  if (tokens.ndim() != 3) throw std::invalid_argument("mix_features: tokens must be [S,N,D]");
  const int S = static_cast<int>(tokens.dim(0));
  const int N = static_cast<int>(tokens.dim(1));
  const int64_t D = cfg_.feature_dim;
  if (static_cast<int>(occ.size()) != S * N)
    throw std::invalid_argument("mix_features: occlusion flags must be S*N");

  const double low = -1.0;  // any negative marks a masked key for mask_pin

  // SAP mask [S,N,N]: occluded tokens never serve as keys
  Tensor sap_mask = Tensor::zeros({S, N, N}, cfg_.dtype);
  for (int s = 0; s < S; ++s)
    for (int kq = 0; kq < N; ++kq)
      for (int kk = 0; kk < N; ++kk)
        if (occ[static_cast<size_t>(s * N + kk)])
          sap_mask.set_value((static_cast<int64_t>(s) * N + kq) * N + kk, low);

  // SAF mask [N,S+1,S+1]: slot S holds the fused token and is never masked
  Tensor saf_mask = Tensor::zeros({N, S + 1, S + 1}, cfg_.dtype);
  for (int kpt = 0; kpt < N; ++kpt)
    for (int sq = 0; sq <= S; ++sq)
      for (int sk = 0; sk < S; ++sk)
        if (occ[static_cast<size_t>(sk * N + kpt)])
          saf_mask.set_value((static_cast<int64_t>(kpt) * (S + 1) + sq) * (S + 1) + sk, low);

  Tensor pe = cfg_.use_sap ? positional_encoding(coords, S, N) : Tensor();

  Tensor x = tokens;                                                   // [S,N,D]
  Tensor fused = ops::broadcast_to(ops::reshape(fused_init_, {D}), {N, D});  // [N,D]
  Tensor query = ops::reshape(f0, {1, f0.dim(0), D});                  // [1,H'W',D]

  for (int outer = 0; outer < cfg_.n0; ++outer) {
    if (cfg_.use_sap) {
      x = ops::add(x, pe);
      for (int it = 0; it < cfg_.n1; ++it) x = attn_layer(sap_, x, x, sap_mask);
    }
    // SAF over the frame axis with the fused token appended as slot S+1
    Tensor per_point = ops::permute(x, {1, 0, 2});  // [N,S,D]
    Tensor stacked = ops::concat({per_point, ops::reshape(fused, {N, 1, D})}, 1);  // [N,S+1,D]
    for (int it = 0; it < cfg_.n2; ++it) stacked = attn_layer(saf_, stacked, stacked, saf_mask);
    x = ops::permute(ops::slice(stacked, 1, 0, S), {1, 0, 2});  // [S,N,D]
    fused = ops::reshape(ops::slice(stacked, 1, S, 1), {N, D});

    if (cfg_.use_marq) {
      Tensor fused_b = ops::reshape(fused, {1, N, D});
      for (int it = 0; it < cfg_.n3; ++it) {
        fused_b = attn_layer(marq_self_ref_, fused_b, fused_b, std::nullopt);
        query = attn_layer(marq_self_query_, query, query, std::nullopt);
        Tensor fused_next = attn_layer(marq_cross_ref_, fused_b, query, std::nullopt);
        query = attn_layer(marq_cross_query_, query, fused_b, std::nullopt);
        fused_b = fused_next;
      }
      fused = ops::reshape(fused_b, {N, D});
    }
  }

  MixResult out;
  out.fused = fused;
  out.query = ops::reshape(query, {f0.dim(0), D});
  return out;
}

Tensor Matcher::build_cost_volume(const Tensor& fused, const Tensor& query) const {
  const int64_t D = cfg_.feature_dim;
  const int64_t hw = query.dim(0);
  const int64_t grid = cfg_.grid_size();
  if (hw != grid * grid)
    throw std::invalid_argument("build_cost_volume: query feature count " + std::to_string(hw) +
                                " does not match the feature grid");
  Tensor cost = ops::matmul(query, ops::permute(fused, {1, 0}));  // [H'W',N]
  cost = ops::mul_scalar(cost, 1.0 / std::sqrt(static_cast<double>(D)));
  return ops::reshape(cost, {grid, grid, fused.dim(0)});
}

MatchPrediction Matcher::predict_heads(const Tensor& cost_volume) {
  const int64_t grid = cfg_.grid_size();
  const int64_t N = cost_volume.dim(2);
  Tensor x = ops::permute(cost_volume, {2, 0, 1});  // [N,H',W']
  x = ops::reshape(x, {1, 1, N, grid, grid});
  x = ops::relu(ops::conv3d(x, *params_.find("heads.t0.w"), *params_.find("heads.t0.b"), 1, 1));
  x = ops::relu(ops::conv3d(x, *params_.find("heads.t1.w"), *params_.find("heads.t1.b"), 1, 1));
  x = ops::relu(ops::conv3d(x, *params_.find("heads.t2.w"), *params_.find("heads.t2.b"), 1, 1));

  Tensor heat = ops::conv3d(x, *params_.find("heads.heat.w"), *params_.find("heads.heat.b"), 1, 1);
  heat = ops::softmax(ops::reshape(heat, {N, grid * grid}), 1);  // [N,H'W']

  Tensor pooled = ops::reduce_mean_axis(ops::reshape(x, {8, N, grid * grid}), 2);  // [8,N]
  Tensor occ_logit = ops::add(ops::matmul(ops::permute(pooled, {1, 0}), *params_.find("heads.occ.w")),
                              *params_.find("heads.occ.b"));  // [N,1]
  Tensor occ = ops::reshape(ops::sigmoid(occ_logit), {N});

  // spatial soft-argmax: probability-weighted mean within a window around the
  // hard argmax (lowest flat index wins ties), mapped to normalized coords
  const int r = cfg_.softargmax_radius;
  Tensor window = Tensor::zeros({N, grid * grid}, cfg_.dtype);
  for (int64_t kpt = 0; kpt < N; ++kpt) {
    int64_t best = 0;
    double best_v = heat.value_at(kpt * grid * grid);
    for (int64_t i = 1; i < grid * grid; ++i) {
      const double v = heat.value_at(kpt * grid * grid + i);
      if (v > best_v) {
        best_v = v;
        best = i;
      }
    }
    const int64_t by = best / grid, bx = best % grid;
    for (int64_t y = std::max<int64_t>(0, by - r); y <= std::min<int64_t>(grid - 1, by + r); ++y)
      for (int64_t x2 = std::max<int64_t>(0, bx - r); x2 <= std::min<int64_t>(grid - 1, bx + r); ++x2)
        window.set_value(kpt * grid * grid + y * grid + x2, 1.0);
  }
  Tensor gx = Tensor::zeros({grid * grid}, cfg_.dtype);
  Tensor gy = Tensor::zeros({grid * grid}, cfg_.dtype);
  for (int64_t y = 0; y < grid; ++y)
    for (int64_t x2 = 0; x2 < grid; ++x2) {
      gx.set_value(y * grid + x2, static_cast<double>(x2));
      gy.set_value(y * grid + x2, static_cast<double>(y));
    }
  Tensor w = ops::mul(heat, window);                    // [N,H'W']
  Tensor z = ops::reduce_sum_axis(w, 1);                // [N]
  Tensor sx = ops::div(ops::reduce_sum_axis(ops::mul(w, gx), 1), z);  // grid units
  Tensor sy = ops::div(ops::reduce_sum_axis(ops::mul(w, gy), 1), z);
  // grid cell g corresponds to input pixel stride*g (the retrieval map inverse)
  const double px_scale = 2.0 * cfg_.stride / (cfg_.image_size - 1.0);
  Tensor cx = ops::add_scalar(ops::mul_scalar(sx, px_scale), -1.0);
  Tensor cy = ops::add_scalar(ops::mul_scalar(sy, px_scale), -1.0);
  Tensor coords = ops::concat({ops::reshape(cx, {N, 1}), ops::reshape(cy, {N, 1})}, 1);

  MatchPrediction pred;
  pred.heatmaps = ops::reshape(heat, {N, grid, grid});
  pred.coords = coords;
  pred.occ_prob = occ;
  return pred;
}

MatchPrediction Matcher::forward(const MatcherInput& input) {
  const int64_t B = input.images.dim(0);
  const int S = static_cast<int>(B - 1);
  const int N = input.n_points;
  const int64_t D = cfg_.feature_dim;
  const int64_t grid = cfg_.grid_size();
  if (static_cast<int>(input.ref_coords.size()) != S * N ||
      static_cast<int>(input.ref_occ.size()) != S * N)
    throw std::invalid_argument("forward: coordinate/occlusion arrays must be S*N");

  Tensor fmaps = encode(input.images);  // [S+1,D,H',W']
  Tensor f0 = ops::reshape(ops::slice(fmaps, 0, 0, 1), {D, grid * grid});
  f0 = ops::permute(f0, {1, 0});  // [H'W',D]

  std::vector<Tensor> token_slices;
  token_slices.reserve(static_cast<size_t>(S));
  for (int s = 0; s < S; ++s) {
    Tensor fm = ops::reshape(ops::slice(fmaps, 0, s + 1, 1), {D, grid, grid});
    std::vector<std::array<double, 2>> coords(input.ref_coords.begin() + s * N,
                                              input.ref_coords.begin() + (s + 1) * N);
    token_slices.push_back(ops::reshape(retrieve_tokens(fm, coords), {1, N, D}));
  }
  Tensor tokens = ops::concat(token_slices, 0);  // [S,N,D]

  MixResult mixed = mix_features(tokens, input.ref_occ, input.ref_coords, f0);
  Tensor cost = build_cost_volume(mixed.fused, mixed.query);
  return predict_heads(cost);
}

LossParts Matcher::loss(const MatchPrediction& pred, const QueryTruthTensors& truth) const {
  Tensor bce = ops::bce_with_probs(pred.occ_prob, truth.occ);  // [N]
  Tensor hub = ops::huber(pred.coords, truth.coords, cfg_.huber_delta);  // [N,2]
  Tensor loc = ops::mul(ops::reduce_sum_axis(hub, 1), truth.visible);    // [N]
  LossParts parts;
  parts.occ = ops::reduce_mean(bce);
  parts.loc = ops::mul_scalar(ops::reduce_mean(loc), cfg_.loss_weight);
  parts.total = ops::add(parts.occ, parts.loc);
  return parts;
}

Tensor images_to_tensor(const std::vector<const ImageRGB*>& images, Dtype dt) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: no images");
  const int H = images[0]->height, W = images[0]->width;
  Tensor t = Tensor::zeros({static_cast<int64_t>(images.size()), 3, H, W}, dt);
  int64_t i = 0;
  for (const ImageRGB* img : images) {
    if (img->width != W || img->height != H)
      throw std::invalid_argument("images_to_tensor: mixed image sizes");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) t.set_value(i++, img->px(x, y)[c]);
  }
  return t;
}

}  // namespace mixri
