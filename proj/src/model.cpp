#include "avts/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace avts {

// ---- config ----

void ModelConfig::validate() const {
  if (vocab < 2) throw std::invalid_argument("config: vocab must be >= 2");
  if (model_dim < 1 || n_heads < 1 || model_dim % n_heads != 0)
    throw std::invalid_argument("config: model_dim must divide by n_heads");
  if (n_mels < 1 || stack < 1 || video_dim < 1 || ffn_dim < 1)
    throw std::invalid_argument("config: bad dimension");
  if (enc_layers < 1 || dec_layers < 1)
    throw std::invalid_argument("config: need at least one layer per stack");
  if (conv_width < 1 || conv_width % 2 == 0)
    throw std::invalid_argument("config: conv_width must be odd");
  if (use_adaptor && (adaptor_width < 1 || adaptor_stride < 1))
    throw std::invalid_argument("config: bad adaptor");
  if (max_target_len < 1)
    throw std::invalid_argument("config: max_target_len must be >= 1");
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "n_mels=" << n_mels << "\nstack=" << stack << "\nvideo_dim=" << video_dim
     << "\nmodel_dim=" << model_dim << "\nn_heads=" << n_heads
     << "\nffn_dim=" << ffn_dim << "\nenc_layers=" << enc_layers
     << "\ndec_layers=" << dec_layers << "\nconv_width=" << conv_width
     << "\nuse_adaptor=" << (use_adaptor ? 1 : 0)
     << "\nadaptor_width=" << adaptor_width
     << "\nadaptor_stride=" << adaptor_stride << "\nvocab=" << vocab
     << "\nmax_target_len=" << max_target_len << "\n";
  return os.str();
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
  std::map<std::string, int> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = std::stoi(line.substr(eq + 1));
  }
  ModelConfig c;
  auto take = [&kv](const char* key, int fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
  };
  c.n_mels = take("n_mels", c.n_mels);
  c.stack = take("stack", c.stack);
  c.video_dim = take("video_dim", c.video_dim);
  c.model_dim = take("model_dim", c.model_dim);
  c.n_heads = take("n_heads", c.n_heads);
  c.ffn_dim = take("ffn_dim", c.ffn_dim);
  c.enc_layers = take("enc_layers", c.enc_layers);
  c.dec_layers = take("dec_layers", c.dec_layers);
  c.conv_width = take("conv_width", c.conv_width);
  c.use_adaptor = take("use_adaptor", c.use_adaptor ? 1 : 0) != 0;
  c.adaptor_width = take("adaptor_width", c.adaptor_width);
  c.adaptor_stride = take("adaptor_stride", c.adaptor_stride);
  c.vocab = take("vocab", c.vocab);
  c.max_target_len = take("max_target_len", c.max_target_len);
  c.validate();
  return c;
}

// ---- parameter traversal ----

namespace {

using ParamFn = std::function<void(const std::string&, Tensor&)>;

void visit(const std::string& name, Tensor& t, const ParamFn& fn) { fn(name, t); }

void visit(const std::string& p, LinearP& l, const ParamFn& fn) {
  visit(p + ".w", l.w, fn);
  visit(p + ".b", l.b, fn);
}

void visit(const std::string& p, NormP& n, const ParamFn& fn) {
  visit(p + ".gain", n.gain, fn);
  visit(p + ".bias", n.bias, fn);
}

void visit(const std::string& p, AttnP& a, const ParamFn& fn) {
  visit(p + ".q", a.q, fn);
  visit(p + ".k", a.k, fn);
  visit(p + ".v", a.v, fn);
  visit(p + ".o", a.o, fn);
}

void visit(const std::string& p, FfnP& f, const ParamFn& fn) {
  visit(p + ".in", f.in, fn);
  visit(p + ".out", f.out, fn);
}

void visit(const std::string& p, ConvModuleP& c, const ParamFn& fn) {
  visit(p + ".pw1", c.pw1, fn);
  visit(p + ".dw_w", c.dw_w, fn);
  visit(p + ".dw_b", c.dw_b, fn);
  visit(p + ".pw2", c.pw2, fn);
}

void visit(const std::string& p, EncLayerP& l, const ParamFn& fn) {
  visit(p + ".ln_ffn1", l.ln_ffn1, fn);
  visit(p + ".ffn1", l.ffn1, fn);
  visit(p + ".ln_attn", l.ln_attn, fn);
  visit(p + ".attn", l.attn, fn);
  visit(p + ".ln_conv", l.ln_conv, fn);
  visit(p + ".conv", l.conv, fn);
  visit(p + ".ln_ffn2", l.ln_ffn2, fn);
  visit(p + ".ffn2", l.ffn2, fn);
  visit(p + ".ln_final", l.ln_final, fn);
}

void visit(const std::string& p, DecLayerP& l, const ParamFn& fn) {
  visit(p + ".ln_self", l.ln_self, fn);
  visit(p + ".self", l.self_attn, fn);
  visit(p + ".ln_cross", l.ln_cross, fn);
  visit(p + ".cross", l.cross_attn, fn);
  visit(p + ".ln_ffn", l.ln_ffn, fn);
  visit(p + ".ffn", l.ffn, fn);
}

}  // namespace

void ModelParams::for_each_param(const ParamFn& fn) {
  visit("audio_frontend.fc1", audio_frontend.fc1, fn);
  visit("audio_frontend.fc2", audio_frontend.fc2, fn);
  visit("video_frontend.conv1_w", video_frontend.conv1_w, fn);
  visit("video_frontend.conv1_b", video_frontend.conv1_b, fn);
  visit("video_frontend.conv2_w", video_frontend.conv2_w, fn);
  visit("video_frontend.conv2_b", video_frontend.conv2_b, fn);
  visit("video_frontend.proj", video_frontend.proj, fn);
  if (config.use_adaptor) {
    visit("adaptor.w", adaptor.w, fn);
    visit("adaptor.b", adaptor.b, fn);
  }
  for (size_t i = 0; i < encoder_layers.size(); ++i)
    visit("encoder.l" + std::to_string(i), encoder_layers[i], fn);
  visit("decoder.embedding", unit_embedding, fn);
  for (size_t i = 0; i < decoder_layers.size(); ++i)
    visit("decoder.l" + std::to_string(i), decoder_layers[i], fn);
  visit("decoder.final_norm", decoder_final_norm, fn);
  visit("decoder.out_proj", output_projection, fn);
}

ParamList ModelParams::param_list() {
  ParamList list;
  for_each_param([&list](const std::string& name, Tensor& t) {
    list.emplace_back(name, &t);
  });
  return list;
}

// ---- init / clone ----

namespace {

LinearP init_linear(int in, int out, Rng& rng) {
  LinearP p;
  p.w = Tensor::randn({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng,
                      true);
  p.b = Tensor::zeros({out}, true);
  return p;
}

NormP init_norm(int d) {
  NormP p;
  p.gain = Tensor::full({d}, 1.0);
  p.gain.requires_grad = true;
  p.gain.grad = std::make_shared<std::vector<double>>(d, 0.0);
  p.bias = Tensor::zeros({d}, true);
  return p;
}

AttnP init_attn(int d, Rng& rng) {
  return {init_linear(d, d, rng), init_linear(d, d, rng), init_linear(d, d, rng),
          init_linear(d, d, rng)};
}

FfnP init_ffn(int d, int f, Rng& rng) {
  return {init_linear(d, f, rng), init_linear(f, d, rng)};
}

}  // namespace

ModelParams init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams m;
  m.config = cfg;
  const int d = cfg.model_dim;

  m.audio_frontend.fc1 = init_linear(cfg.audio_in(), d, rng);
  m.audio_frontend.fc2 = init_linear(d, d, rng);

  m.video_frontend.conv1_w = Tensor::randn(
      {3 * cfg.video_dim, d}, 1.0 / std::sqrt(3.0 * cfg.video_dim), rng, true);
  m.video_frontend.conv1_b = Tensor::zeros({d}, true);
  m.video_frontend.conv2_w =
      Tensor::randn({3 * d, d}, 1.0 / std::sqrt(3.0 * d), rng, true);
  m.video_frontend.conv2_b = Tensor::zeros({d}, true);
  m.video_frontend.proj = init_linear(d, d, rng);

  if (cfg.use_adaptor) {
    m.adaptor.w = Tensor::randn({cfg.adaptor_width * d, d},
                                1.0 / std::sqrt(static_cast<double>(cfg.adaptor_width) * d),
                                rng, true);
    m.adaptor.b = Tensor::zeros({d}, true);
  }

  for (int i = 0; i < cfg.enc_layers; ++i) {
    EncLayerP l;
    l.ln_ffn1 = init_norm(d);
    l.ffn1 = init_ffn(d, cfg.ffn_dim, rng);
    l.ln_attn = init_norm(d);
    l.attn = init_attn(d, rng);
    l.ln_conv = init_norm(d);
    l.conv.pw1 = init_linear(d, 2 * d, rng);
    l.conv.dw_w = Tensor::randn({cfg.conv_width, d},
                                1.0 / std::sqrt(static_cast<double>(cfg.conv_width)),
                                rng, true);
    l.conv.dw_b = Tensor::zeros({d}, true);
    l.conv.pw2 = init_linear(d, d, rng);
    l.ln_ffn2 = init_norm(d);
    l.ffn2 = init_ffn(d, cfg.ffn_dim, rng);
    l.ln_final = init_norm(d);
    m.encoder_layers.push_back(std::move(l));
  }

  m.unit_embedding = Tensor::randn({cfg.vocab + 1, d}, 0.5, rng, true);
  for (int i = 0; i < cfg.dec_layers; ++i) {
    DecLayerP l;
    l.ln_self = init_norm(d);
    l.self_attn = init_attn(d, rng);
    l.ln_cross = init_norm(d);
    l.cross_attn = init_attn(d, rng);
    l.ln_ffn = init_norm(d);
    l.ffn = init_ffn(d, cfg.ffn_dim, rng);
    m.decoder_layers.push_back(std::move(l));
  }
  m.decoder_final_norm = init_norm(d);
  m.output_projection = init_linear(d, cfg.n_symbols(), rng);
  return m;
}

ModelParams clone_model(const ModelParams& src) {
  Rng dummy(0);
  ModelParams dst = init_model(src.config, dummy);
  ParamList from = const_cast<ModelParams&>(src).param_list();
  ParamList to = dst.param_list();
  for (size_t i = 0; i < from.size(); ++i) *to[i].second->data = *from[i].second->data;
  return dst;
}

// ---- fusion ----

FusionBranch fusion_branch_for_draw(double u, double dropout_p) {
  if (dropout_p < 0.0 || dropout_p > 1.0)
    throw std::invalid_argument("fuse: dropout_p must be in [0,1]");
  if (u < 1.0 - dropout_p) return FusionBranch::both;
  if (u < 1.0 - dropout_p / 2.0) return FusionBranch::audio_only;
  return FusionBranch::video_only;
}

FusionBranch draw_fusion_branch(FusionMode mode, Rng* rng, double dropout_p) {
  switch (mode) {
    case FusionMode::inference_both: return FusionBranch::both;
    case FusionMode::force_audio_only: return FusionBranch::audio_only;
    case FusionMode::force_video_only: return FusionBranch::video_only;
    case FusionMode::train_stochastic:
      if (!rng)
        throw std::invalid_argument("fuse: train_stochastic needs an rng");
      return fusion_branch_for_draw(rng->uniform01(), dropout_p);
  }
  throw std::invalid_argument("fuse: bad mode");
}

Tensor fuse_features(const std::optional<Tensor>& fa,
                     const std::optional<Tensor>& fv, FusionBranch branch) {
  if (!fa && !fv) throw std::invalid_argument("fuse: both modalities absent");
  if (fa && fv && !fa->same_shape(*fv))
    throw std::invalid_argument("fuse: shape mismatch " + shape_str(fa->shape) +
                                " vs " + shape_str(fv->shape));
  const Tensor& shape_src = fa ? *fa : *fv;
  switch (branch) {
    case FusionBranch::both:
      if (fa && fv) return add(*fa, *fv);
      return fa ? *fa : *fv;  // absent stream is the zero stream
    case FusionBranch::audio_only:
      return fa ? *fa : Tensor::zeros(shape_src.shape);
    case FusionBranch::video_only:
      return fv ? *fv : Tensor::zeros(shape_src.shape);
  }
  throw std::invalid_argument("fuse: bad branch");
}

FeatureStream fuse(const std::optional<FeatureStream>& fa,
                   const std::optional<FeatureStream>& fv, FusionMode mode,
                   Rng* rng, double dropout_p) {
  if (fa && fv && fa->frame_rate_hz != fv->frame_rate_hz)
    throw std::invalid_argument("fuse: frame rate mismatch");
  std::optional<Tensor> ta, tv;
  if (fa) ta = fa->frames;
  if (fv) tv = fv->frames;
  const FusionBranch branch = draw_fusion_branch(mode, rng, dropout_p);
  FeatureStream out;
  out.frames = fuse_features(ta, tv, branch);
  out.frame_rate_hz = fa ? fa->frame_rate_hz : fv->frame_rate_hz;
  out.modality = Modality::audio;
  return out;
}

// ---- forward blocks ----

namespace {

Tensor linear(const Tensor& x, const LinearP& p) {
  return add_bias(matmul(x, p.w), p.b);
}

constexpr double kLnEps = 1e-5;

Tensor norm(const Tensor& x, const NormP& p) {
  return layer_norm(x, p.gain, p.bias, kLnEps);
}

Tensor ffn_swish(const Tensor& x, const FfnP& p) {
  return linear(swish(linear(x, p.in)), p.out);
}

Tensor ffn_relu(const Tensor& x, const FfnP& p) {
  return linear(relu(linear(x, p.in)), p.out);
}

Tensor attn_block(const Tensor& xq, const Tensor& xkv, const AttnP& p,
                  int n_heads, const std::optional<Tensor>& mask) {
  Tensor q = linear(xq, p.q);
  Tensor k = linear(xkv, p.k);
  Tensor v = linear(xkv, p.v);
  return linear(multi_head_attention(q, k, v, n_heads, mask), p.o);
}

Tensor conformer_conv(const Tensor& x, const ConvModuleP& p) {
  Tensor h = glu(linear(x, p.pw1));
  h = depthwise_conv1d(h, p.dw_w, p.dw_b);
  return linear(swish(h), p.pw2);
}

Tensor conformer_layer(const Tensor& x, const EncLayerP& l, int n_heads) {
  Tensor h = add(x, scale(ffn_swish(norm(x, l.ln_ffn1), l.ffn1), 0.5));
  Tensor a = norm(h, l.ln_attn);
  h = add(h, attn_block(a, a, l.attn, n_heads, std::nullopt));
  h = add(h, conformer_conv(norm(h, l.ln_conv), l.conv));
  h = add(h, scale(ffn_swish(norm(h, l.ln_ffn2), l.ffn2), 0.5));
  return norm(h, l.ln_final);
}

}  // namespace

Tensor sinusoidal_posenc(int t, int d) {
  Tensor pe = Tensor::zeros({t, d});
  for (int pos = 0; pos < t; ++pos) {
    for (int i = 0; i < d; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
      pe.at(pos, i) = std::sin(angle);
      if (i + 1 < d) pe.at(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

Tensor audio_frontend_fwd(const ModelParams& m, const Tensor& stacked) {
  if (stacked.cols() != m.config.audio_in())
    throw std::invalid_argument("audio_frontend: expected dim " +
                                std::to_string(m.config.audio_in()) + ", got " +
                                std::to_string(stacked.cols()));
  return linear(relu(linear(stacked, m.audio_frontend.fc1)), m.audio_frontend.fc2);
}

Tensor video_frontend_fwd(const ModelParams& m, const Tensor& roi) {
  if (roi.cols() != m.config.video_dim)
    throw std::invalid_argument("video_frontend: expected dim " +
                                std::to_string(m.config.video_dim) + ", got " +
                                std::to_string(roi.cols()));
  Tensor h = relu(conv1d(pad_rows(roi, 1, 1), m.video_frontend.conv1_w,
                         m.video_frontend.conv1_b, 3, 1));
  h = relu(conv1d(pad_rows(h, 1, 1), m.video_frontend.conv2_w,
                  m.video_frontend.conv2_b, 3, 1));
  return linear(h, m.video_frontend.proj);
}

Tensor adapt_fwd(const ModelParams& m, const Tensor& fa) {
  if (!m.config.use_adaptor)
    throw std::invalid_argument("adapt: adaptor disabled in config");
  return conv1d(fa, m.adaptor.w, m.adaptor.b, m.config.adaptor_width,
                m.config.adaptor_stride);
}

Tensor encode_fwd(const ModelParams& m, const Tensor& fused, bool use_posenc) {
  if (fused.cols() != m.config.model_dim)
    throw std::invalid_argument("encode: expected dim " +
                                std::to_string(m.config.model_dim) + ", got " +
                                std::to_string(fused.cols()));
  Tensor x = use_posenc
                 ? add(fused, sinusoidal_posenc(fused.rows(), fused.cols()))
                 : fused;
  for (const EncLayerP& l : m.encoder_layers)
    x = conformer_layer(x, l, m.config.n_heads);
  return x;
}

SourceTensors prepare_source(const ModelConfig& cfg,
                             const std::optional<Waveform>& audio,
                             const std::optional<Tensor>& video) {
  SourceTensors src;
  if (audio) {
    FeatureStream mel = logmel(*audio, cfg.n_mels);
    src.audio_stacked = stack_frames(mel, cfg.stack).frames;
  }
  if (video) src.video = *video;
  return src;
}

EncodeResult encode_source(const ModelParams& m, const SourceTensors& src,
                           FusionMode mode, Rng* rng, double dropout_p) {
  if (!src.audio_stacked && !src.video)
    throw std::invalid_argument("encode_source: both modalities absent");
  const FusionBranch branch = draw_fusion_branch(mode, rng, dropout_p);

  // Unused branches are skipped entirely; their parameters stay out of the
  // graph and keep zero gradients.
  std::optional<Tensor> fa, fv;
  if (src.audio_stacked && branch != FusionBranch::video_only) {
    Tensor a = audio_frontend_fwd(m, *src.audio_stacked);
    if (m.config.use_adaptor) a = adapt_fwd(m, a);
    fa = a;
  }
  if (src.video && branch != FusionBranch::audio_only)
    fv = video_frontend_fwd(m, *src.video);

  if (fa && fv && fa->rows() != fv->rows()) {
    const int ta = fa->rows(), tv = fv->rows();
    if (std::abs(ta - tv) > 1)
      throw std::invalid_argument("encode_source: stream lengths differ by " +
                                  std::to_string(std::abs(ta - tv)));
    const int t = std::min(ta, tv);
    if (ta > t) fa = slice_rows(*fa, 0, t);
    if (tv > t) fv = slice_rows(*fv, 0, t);
  }
  Tensor fused = fuse_features(fa, fv, branch);
  return {encode_fwd(m, fused), branch};
}

Tensor decoder_logits(const ModelParams& m, const Tensor& x, const UnitSeq& units) {
  if (static_cast<int>(units.size()) > m.config.max_target_len)
    throw std::invalid_argument("decoder: target longer than max_target_len");
  std::vector<int> ids;
  ids.reserve(units.size() + 1);
  ids.push_back(m.config.bos_row());
  for (int u : units) {
    if (u < 0 || u >= m.config.vocab)
      throw std::invalid_argument("decoder: unit id out of range");
    ids.push_back(u);
  }
  const int l = static_cast<int>(ids.size());
  Tensor h = add(embed(m.unit_embedding, ids), sinusoidal_posenc(l, m.config.model_dim));
  const Tensor mask = causal_mask(l);
  for (const DecLayerP& lay : m.decoder_layers) {
    Tensor s = norm(h, lay.ln_self);
    h = add(h, attn_block(s, s, lay.self_attn, m.config.n_heads, mask));
    h = add(h, attn_block(norm(h, lay.ln_cross), x, lay.cross_attn,
                          m.config.n_heads, std::nullopt));
    h = add(h, ffn_relu(norm(h, lay.ln_ffn), lay.ffn));
  }
  return linear(norm(h, m.decoder_final_norm), m.output_projection);
}

// ---- row-level inference path (keeps per-step KV caches) ----

namespace {

struct EncOut {
  const ModelParams* m;
  Tensor x;
  // per decoder layer: projected keys/values of x, flattened T x d
  std::vector<std::vector<double>> cross_k, cross_v;
  int t_enc;
};

void matvec_row(const double* x, const LinearP& p, double* out) {
  const int in = p.w.shape[0], on = p.w.shape[1];
  for (int j = 0; j < on; ++j) out[j] = (*p.b.data)[j];
  for (int i = 0; i < in; ++i) {
    const double xv = x[i];
    if (xv == 0.0) continue;
    const double* wrow = p.w.data->data() + static_cast<size_t>(i) * on;
    for (int j = 0; j < on; ++j) out[j] += xv * wrow[j];
  }
}

void ln_row(const double* x, const NormP& p, int d, double* out) {
  double mu = 0.0;
  for (int j = 0; j < d; ++j) mu += x[j];
  mu /= d;
  double var = 0.0;
  for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= d;
  const double inv = 1.0 / std::sqrt(var + kLnEps);
  for (int j = 0; j < d; ++j)
    out[j] = (x[j] - mu) * inv * (*p.gain.data)[j] + (*p.bias.data)[j];
}

// attention of a single query row over cached keys/values
void attend_row(const double* q, const std::vector<double>& kc,
                const std::vector<double>& vc, int len, int d, int n_heads,
                double* out) {
  const int dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> a(len);
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    double mx = -1e300;
    for (int j = 0; j < len; ++j) {
      const double* kj = kc.data() + static_cast<size_t>(j) * d + off;
      double s = 0.0;
      for (int c = 0; c < dh; ++c) s += q[off + c] * kj[c];
      a[j] = s * sc;
      mx = std::max(mx, a[j]);
    }
    double sum = 0.0;
    for (int j = 0; j < len; ++j) {
      a[j] = std::exp(a[j] - mx);
      sum += a[j];
    }
    for (int c = 0; c < dh; ++c) out[off + c] = 0.0;
    for (int j = 0; j < len; ++j) {
      const double w = a[j] / sum;
      const double* vj = vc.data() + static_cast<size_t>(j) * d + off;
      for (int c = 0; c < dh; ++c) out[off + c] += w * vj[c];
    }
  }
}

void posenc_row(int pos, int d, double* out) {
  for (int i = 0; i < d; i += 2) {
    const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
    out[i] = std::sin(angle);
    if (i + 1 < d) out[i + 1] = std::cos(angle);
  }
}

EncOut make_enc_out(const ModelParams& m, const Tensor& x) {
  if (x.cols() != m.config.model_dim)
    throw std::invalid_argument("decode: encoder output dim mismatch");
  EncOut e;
  e.m = &m;
  e.x = x;
  e.t_enc = x.rows();
  const int d = m.config.model_dim;
  for (const DecLayerP& lay : m.decoder_layers) {
    std::vector<double> k(static_cast<size_t>(e.t_enc) * d);
    std::vector<double> v(static_cast<size_t>(e.t_enc) * d);
    for (int i = 0; i < e.t_enc; ++i) {
      const double* row = x.data->data() + static_cast<size_t>(i) * d;
      matvec_row(row, lay.cross_attn.k, k.data() + static_cast<size_t>(i) * d);
      matvec_row(row, lay.cross_attn.v, v.data() + static_cast<size_t>(i) * d);
    }
    e.cross_k.push_back(std::move(k));
    e.cross_v.push_back(std::move(v));
  }
  return e;
}

struct DecodeState {
  int len = 0;  // tokens fed, including <bos>
  std::vector<std::vector<double>> self_k, self_v;  // per layer, len x d
};

// Feeds one token (embedding row index; bos_row for <bos>) and returns the
// next-symbol distribution over vocab+1.
std::vector<double> decode_feed(const EncOut& enc, DecodeState& st, int row_id) {
  const ModelParams& m = *enc.m;
  const int d = m.config.model_dim;
  const int heads = m.config.n_heads;
  if (st.self_k.empty()) {
    st.self_k.resize(m.decoder_layers.size());
    st.self_v.resize(m.decoder_layers.size());
  }

  std::vector<double> h(d), tmp(d), tmp2(d);
  const double* emb = m.unit_embedding.data->data() + static_cast<size_t>(row_id) * d;
  posenc_row(st.len, d, h.data());
  for (int j = 0; j < d; ++j) h[j] += emb[j];

  std::vector<double> q(d), k(d), v(d), attn_out(d);
  std::vector<double> ffn_h(m.config.ffn_dim);
  for (size_t li = 0; li < m.decoder_layers.size(); ++li) {
    const DecLayerP& lay = m.decoder_layers[li];
    // causal self-attention over the cache
    ln_row(h.data(), lay.ln_self, d, tmp.data());
    matvec_row(tmp.data(), lay.self_attn.q, q.data());
    matvec_row(tmp.data(), lay.self_attn.k, k.data());
    matvec_row(tmp.data(), lay.self_attn.v, v.data());
    st.self_k[li].insert(st.self_k[li].end(), k.begin(), k.end());
    st.self_v[li].insert(st.self_v[li].end(), v.begin(), v.end());
    attend_row(q.data(), st.self_k[li], st.self_v[li], st.len + 1, d, heads,
               tmp.data());
    matvec_row(tmp.data(), lay.self_attn.o, tmp2.data());
    for (int j = 0; j < d; ++j) h[j] += tmp2[j];
    // cross-attention
    ln_row(h.data(), lay.ln_cross, d, tmp.data());
    matvec_row(tmp.data(), lay.cross_attn.q, q.data());
    attend_row(q.data(), enc.cross_k[li], enc.cross_v[li], enc.t_enc, d, heads,
               tmp.data());
    matvec_row(tmp.data(), lay.cross_attn.o, tmp2.data());
    for (int j = 0; j < d; ++j) h[j] += tmp2[j];
    // feed-forward
    ln_row(h.data(), lay.ln_ffn, d, tmp.data());
    matvec_row(tmp.data(), lay.ffn.in, ffn_h.data());
    for (double& x : ffn_h) x = x > 0.0 ? x : 0.0;
    matvec_row(ffn_h.data(), lay.ffn.out, tmp2.data());
    for (int j = 0; j < d; ++j) h[j] += tmp2[j];
  }
  st.len += 1;

  ln_row(h.data(), m.decoder_final_norm, d, tmp.data());
  std::vector<double> logits(m.config.n_symbols());
  matvec_row(tmp.data(), m.output_projection, logits.data());
  double mx = logits[0];
  for (double lv : logits) mx = std::max(mx, lv);
  double sum = 0.0;
  for (double& lv : logits) {
    lv = std::exp(lv - mx);
    sum += lv;
  }
  for (double& lv : logits) lv /= sum;
  return logits;
}

}  // namespace

double score_sequence(const ModelParams& m, const Tensor& x, const UnitSeq& y) {
  NoGradGuard ng;
  Tensor logits = decoder_logits(m, x, y);
  const int v = m.config.n_symbols();
  double total = 0.0;
  for (int i = 0; i <= static_cast<int>(y.size()); ++i) {
    const double* row = logits.data->data() + static_cast<size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    const int target = i < static_cast<int>(y.size()) ? y[i] : m.config.eos_id();
    total += row[target] - mx - std::log(sum);
  }
  return total;
}

std::vector<double> decode_step(const ModelParams& m, const Tensor& x,
                                const UnitSeq& prefix) {
  if (static_cast<int>(prefix.size()) >= m.config.max_target_len)
    throw std::invalid_argument("decode_step: prefix too long");
  for (int u : prefix)
    if (u < 0 || u >= m.config.vocab)
      throw std::invalid_argument("decode_step: unit id out of range");
  EncOut enc = make_enc_out(m, x);
  DecodeState st;
  std::vector<double> probs = decode_feed(enc, st, m.config.bos_row());
  for (int u : prefix) probs = decode_feed(enc, st, u);
  return probs;
}

namespace {

// score desc, then lexicographically lower body, then shorter
bool hyp_better(double lp_a, const UnitSeq& a, double lp_b, const UnitSeq& b) {
  if (lp_a != lp_b) return lp_a > lp_b;
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

UnitSeq beam_search(const ModelParams& m, const Tensor& x, int beam,
                    int max_len) {
  if (beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");
  max_len = std::min(max_len, m.config.max_target_len);
  const int k = m.config.vocab;
  const int eos = m.config.eos_id();
  EncOut enc = make_enc_out(m, x);

  struct Hyp {
    UnitSeq body;
    double lp = 0.0;
    DecodeState st;
    std::vector<double> next_logp;  // after feeding bos+body
  };
  auto feed_new = [&enc](const Hyp& parent, int token) {
    Hyp h;
    h.body = parent.body;
    h.st = parent.st;
    if (token >= 0) {
      h.body.push_back(token);
      h.lp = parent.lp + parent.next_logp[token];
    }
    std::vector<double> probs =
        decode_feed(enc, h.st, token >= 0 ? token : enc.m->config.bos_row());
    h.next_logp.resize(probs.size());
    for (size_t i = 0; i < probs.size(); ++i)
      h.next_logp[i] = std::log(std::max(probs[i], 1e-300));
    return h;
  };

  std::vector<Hyp> active;
  active.push_back(feed_new(Hyp{}, -1));

  bool have_done = false;
  UnitSeq best_body;
  double best_lp = 0.0;
  auto offer_done = [&](const UnitSeq& body, double lp) {
    if (!have_done || hyp_better(lp, body, best_lp, best_body)) {
      have_done = true;
      best_lp = lp;
      best_body = body;
    }
  };

  for (int step = 0; step < max_len && !active.empty(); ++step) {
    // terminations
    for (const Hyp& h : active) offer_done(h.body, h.lp + h.next_logp[eos]);
    // candidate extensions
    struct Cand {
      int hyp;
      int token;
      double lp;
    };
    std::vector<Cand> cands;
    cands.reserve(active.size() * k);
    for (size_t hi = 0; hi < active.size(); ++hi)
      for (int u = 0; u < k; ++u)
        cands.push_back({static_cast<int>(hi), u,
                         active[hi].lp + active[hi].next_logp[u]});
    const size_t keep = std::min<size_t>(beam, cands.size());
    // Active bodies all share one length per step, so comparing the parent
    // bodies elementwise and then the new tokens orders the extended bodies
    // lexicographically.
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [&active](const Cand& a, const Cand& b) {
                        if (a.lp != b.lp) return a.lp > b.lp;
                        const UnitSeq& ba = active[a.hyp].body;
                        const UnitSeq& bb = active[b.hyp].body;
                        if (ba != bb)
                          return std::lexicographical_compare(
                              ba.begin(), ba.end(), bb.begin(), bb.end());
                        return a.token < b.token;
                      });
    cands.resize(keep);
    // prune: extensions only lower log-probability, so once the best
    // candidate cannot beat a finished hypothesis, stop.
    if (have_done && !cands.empty() &&
        cands.front().lp < best_lp)
      break;
    std::vector<Hyp> next;
    next.reserve(keep);
    for (const Cand& c : cands) {
      if (have_done && c.lp < best_lp) continue;
      next.push_back(feed_new(active[c.hyp], c.token));
    }
    active = std::move(next);
  }
  // bodies at max length terminate through eos
  for (const Hyp& h : active)
    if (static_cast<int>(h.body.size()) == max_len)
      offer_done(h.body, h.lp + h.next_logp[eos]);
  return best_body;
}

// ---- checkpoint I/O ----

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff),
                         static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff),
                         static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes, 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& os, double d) {
  const uint64_t v = std::bit_cast<uint64_t>(d);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(bytes, 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& m) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    os.write("AVTS", 4);
    put_u32(os, kCheckpointVersion);
    const std::string cfg = m.config.serialize();
    put_u32(os, static_cast<uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    ParamList params = const_cast<ModelParams&>(m).param_list();
    put_u32(os, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
      put_u32(os, static_cast<uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      const uint32_t rows = static_cast<uint32_t>(t->shape[0]);
      const uint32_t cols =
          t->ndim() == 2 ? static_cast<uint32_t>(t->shape[1]) : 1u;
      put_u32(os, rows);
      put_u32(os, cols);
      put_u32(os, 0);  // frame-rate field unused for parameters
      for (double v : *t->data) put_f64(os, v);
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("save_checkpoint: rename failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "AVTS", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  const uint32_t version = get_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(version));
  const uint32_t cfg_len = get_u32(is);
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);
  if (!is) throw std::runtime_error("load_checkpoint: truncated config");
  const ModelConfig cfg = ModelConfig::deserialize(cfg_text);

  Rng rng(0);
  ModelParams m = init_model(cfg, rng);
  ParamList params = m.param_list();
  const uint32_t count = get_u32(is);
  if (count != params.size())
    throw std::runtime_error("load_checkpoint: tensor count mismatch");
  for (auto& [name, t] : params) {
    const uint32_t name_len = get_u32(is);
    std::string fname(name_len, '\0');
    is.read(fname.data(), name_len);
    if (!is || fname != name)
      throw std::runtime_error("load_checkpoint: expected tensor '" + name +
                               "', found '" + fname + "'");
    const uint32_t rows = get_u32(is);
    const uint32_t cols = get_u32(is);
    get_u32(is);  // rate field
    const uint32_t want_rows = static_cast<uint32_t>(t->shape[0]);
    const uint32_t want_cols = t->ndim() == 2 ? static_cast<uint32_t>(t->shape[1]) : 1u;
    if (rows != want_rows || cols != want_cols)
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    for (double& v : *t->data) v = get_f64(is);
  }
  return m;
}

}  // namespace avts
