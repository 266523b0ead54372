#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "avts/features.hpp"
#include "avts/finite_diff.hpp"
#include "avts/ops.hpp"
#include "avts/rng.hpp"
#include "avts/tensor.hpp"
#include "avts/units.hpp"

namespace avts {

// ---- configuration ----

struct ModelConfig {
  int n_mels = 80;
  int stack = 4;        // audio frame stacking before the frontend
  int video_dim = 24;   // ROI feature dimension
  int model_dim = 64;
  int n_heads = 4;
  int ffn_dim = 128;
  int enc_layers = 2;
  int dec_layers = 2;
  int conv_width = 3;   // depthwise conv width in the encoder block
  bool use_adaptor = false;
  int adaptor_width = 3;
  int adaptor_stride = 2;
  int vocab = 64;       // unit inventory K
  int max_target_len = 64;

  int audio_in() const { return n_mels * stack; }
  int eos_id() const { return vocab; }
  int bos_row() const { return vocab; }        // embedding row for <bos>
  int n_symbols() const { return vocab + 1; }  // output symbols: units + eos

  void validate() const;
  std::string serialize() const;  // key=value lines
  static ModelConfig deserialize(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

// ---- parameters ----

struct LinearP {
  Tensor w, b;  // w is [in, out]
};
struct NormP {
  Tensor gain, bias;
};
struct AttnP {
  LinearP q, k, v, o;
};
struct FfnP {
  LinearP in, out;
};
struct ConvModuleP {
  LinearP pw1;      // d -> 2d, split by GLU
  Tensor dw_w, dw_b;
  LinearP pw2;      // d -> d
};
struct EncLayerP {
  NormP ln_ffn1;
  FfnP ffn1;
  NormP ln_attn;
  AttnP attn;
  NormP ln_conv;
  ConvModuleP conv;
  NormP ln_ffn2;
  FfnP ffn2;
  NormP ln_final;
};
struct DecLayerP {
  NormP ln_self;
  AttnP self_attn;
  NormP ln_cross;
  AttnP cross_attn;
  NormP ln_ffn;
  FfnP ffn;
};
struct AudioFrontendP {
  LinearP fc1, fc2;
};
struct VideoFrontendP {
  Tensor conv1_w, conv1_b;  // width 3, video_dim -> model_dim
  Tensor conv2_w, conv2_b;  // width 3, model_dim -> model_dim
  LinearP proj;
};
struct AdaptorP {
  Tensor w, b;
};

struct ModelParams {
  ModelConfig config;
  AudioFrontendP audio_frontend;
  VideoFrontendP video_frontend;
  AdaptorP adaptor;  // tensors undefined when !config.use_adaptor
  std::vector<EncLayerP> encoder_layers;
  std::vector<DecLayerP> decoder_layers;
  NormP decoder_final_norm;
  Tensor unit_embedding;      // [vocab+1, d]; row vocab is <bos>
  LinearP output_projection;  // d -> vocab+1; column vocab is <eos>

  // Stable traversal over (name, tensor). Group prefixes: audio_frontend,
  // video_frontend, adaptor, encoder, decoder.
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
  ParamList param_list();
};

ModelParams init_model(const ModelConfig& cfg, Rng& rng);
ModelParams clone_model(const ModelParams& m);

// ---- fusion ----

enum class FusionMode {
  train_stochastic,
  inference_both,
  force_audio_only,
  force_video_only
};
enum class FusionBranch { both, audio_only, video_only };

// dropout_p is the total masking probability: both with 1-p, audio-only and
// video-only with p/2 each (p = 0.5 gives 0.50 / 0.25 / 0.25).
FusionBranch fusion_branch_for_draw(double u, double dropout_p = 0.5);
FusionBranch draw_fusion_branch(FusionMode mode, Rng* rng, double dropout_p = 0.5);

// Additive fusion with full-modality masking: the masked or absent stream is
// the zero stream. Errors when both are absent or shapes mismatch.
Tensor fuse_features(const std::optional<Tensor>& fa,
                     const std::optional<Tensor>& fv, FusionBranch branch);
FeatureStream fuse(const std::optional<FeatureStream>& fa,
                   const std::optional<FeatureStream>& fv, FusionMode mode,
                   Rng* rng, double dropout_p = 0.5);

// ---- differentiable forward path ----

Tensor sinusoidal_posenc(int t, int d);

Tensor audio_frontend_fwd(const ModelParams& m, const Tensor& stacked);
Tensor video_frontend_fwd(const ModelParams& m, const Tensor& roi);
// 1-D conv, stride config.adaptor_stride; errors when disabled or T < width.
Tensor adapt_fwd(const ModelParams& m, const Tensor& fa);
// Conformer stack; positional encodings can be zeroed for equivariance tests.
Tensor encode_fwd(const ModelParams& m, const Tensor& fused,
                  bool use_posenc = true);

struct SourceTensors {
  std::optional<Tensor> audio_stacked;  // T x (n_mels*stack)
  std::optional<Tensor> video;          // T x video_dim
};
struct EncodeResult {
  Tensor x;
  FusionBranch branch;
};
// frontends -> adaptor -> length alignment -> fusion -> encoder
EncodeResult encode_source(const ModelParams& m, const SourceTensors& src,
                           FusionMode mode, Rng* rng, double dropout_p = 0.5);

// Feature preprocessing shared by training and evaluation: log-mel + frame
// stacking for audio, ROI features passed through for video.
SourceTensors prepare_source(const ModelConfig& cfg,
                             const std::optional<Waveform>& audio,
                             const std::optional<Tensor>& video);

// Teacher-forced decoder: rows = |units|+1 logits over vocab+1 symbols.
Tensor decoder_logits(const ModelParams& m, const Tensor& x,
                      const UnitSeq& units);

// ---- inference ----

double score_sequence(const ModelParams& m, const Tensor& x, const UnitSeq& y);
// Distribution over the next symbol (units + eos); sums to 1.
std::vector<double> decode_step(const ModelParams& m, const Tensor& x,
                                const UnitSeq& prefix);
// Highest cumulative-log-probability terminated hypothesis; ties prefer the
// lexicographically lower body, then the shorter one. max_len is clamped to
// config.max_target_len.
UnitSeq beam_search(const ModelParams& m, const Tensor& x, int beam,
                    int max_len);

// ---- checkpoint container ----
// magic "AVTS", u32 version, config as a key=value UTF-8 block, then named
// tensors framed as in AVTF but with f64 payloads (bit-exact round trips).
void save_checkpoint(const std::string& path, const ModelParams& m);
ModelParams load_checkpoint(const std::string& path);

}  // namespace avts
