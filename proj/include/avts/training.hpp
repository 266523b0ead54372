#pragma once

#include <string>
#include <vector>

#include "avts/data.hpp"
#include "avts/model.hpp"

namespace avts {

struct TrainConfig {
  int steps = 2000;
  int batch = 6;
  double lr = 3e-3;
  double warmup_frac = 0.1;  // inverse-square-root schedule after warmup
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double modality_dropout = 0.5;
  uint64_t seed = 1;
  int ckpt_every = 200;
  int valid_utts = 32;

  void validate() const;
};

enum class TrainModality { av, a, v };
TrainModality parse_train_modality(const std::string& s);
std::string to_string(TrainModality m);
FusionMode train_fusion_mode(TrainModality m);  // av -> train_stochastic
FusionMode eval_fusion_mode(TrainModality m);   // av -> inference_both

enum class DistillMode { none, av_full, v_decoder_only };
DistillMode parse_distill_mode(const std::string& s);

// Which parameter groups transfer from a source model.
struct DistillPlan {
  DistillMode mode = DistillMode::none;
  std::string source_path;
};

// Adam with bias correction; zero gradients from a fresh state leave
// parameters bit-identical.
class Adam {
 public:
  Adam(const ParamList& params, double beta1, double beta2, double eps);
  void step(const ParamList& params, double lr);
  int t() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// warmup then inverse square root; peak value is `base` at the warmup step
double lr_at(int step, int total_steps, double base, double warmup_frac);

// Mean negative log-likelihood per target symbol including eos. step_logits
// must have |target|+1 rows (teacher forcing).
Tensor ce_loss(const Tensor& step_logits, const UnitSeq& target, int eos_id);

// Copies every parameter whose name starts with one of the prefixes; errors
// on a missing group or a shape mismatch.
void copy_param_groups(ModelParams& dst, const ModelParams& src,
                       const std::vector<std::string>& prefixes);

// AV_full copies audio frontend, encoder and decoder, leaving the adaptor and
// the video frontend at their fresh initialization; V_decoder_only copies the
// decoder (embedding, layers, final norm, output projection) only.
void distill_init(ModelParams& target, const ModelParams& source,
                  DistillMode mode);

struct MetricsRow {
  int step;
  double train_ce;
  double valid_ce;
  double lr;
};

struct TrainResult {
  ModelParams best;  // lowest validation CE seen at checkpoint cadence
  std::vector<MetricsRow> metrics;
  double best_valid_ce = 0.0;
  bool diverged = false;
  int steps_done = 0;
};

// Per step: sample batch, fuse(train_stochastic for av), forward, CE,
// backward, Adam. Deterministic per cfg.seed. On divergence (non-finite
// anywhere) training aborts and the result carries the last good checkpoint.
// When run_dir is non-empty, best.avts / last.avts / metrics.csv are written.
TrainResult train(ModelParams& model, const Corpus& corpus,
                  const TrainConfig& cfg, TrainModality modality,
                  const std::string& run_dir = "");
// Applies the distillation plan (loading plan.source_path) before training.
TrainResult train(ModelParams& model, const Corpus& corpus,
                  const TrainConfig& cfg, TrainModality modality,
                  const DistillPlan& plan, const std::string& run_dir = "");

// Audio-only teacher: same architecture with the video branch disabled.
TrainResult train_audio_teacher(ModelParams& model, const Corpus& corpus,
                                const TrainConfig& cfg,
                                const std::string& run_dir = "");

void write_metrics_csv(const std::string& path,
                       const std::vector<MetricsRow>& rows);

// ---- masked-prediction pretraining ----

struct PretrainConfig {
  int steps = 800;
  int batch = 6;
  double lr = 2e-3;
  double warmup_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  uint64_t seed = 1;
  int clusters = 32;       // frame-target inventory (k-means over audio feats)
  int span = 3;            // contiguous masked span length
  double mask_prob = 0.3;  // fraction of frames masked per modality
  int max_cluster_frames = 20000;
  int ckpt_every = 200;
  int valid_utts = 32;

  void validate() const;
};

// Contiguous-span row mask; never empty (resampled, then one forced span).
std::vector<uint8_t> sample_span_mask(int t, int span, double prob, Rng& rng);

struct PretrainResult {
  ModelParams best;
  std::vector<MetricsRow> metrics;  // masked-CE in the train/valid columns
  bool diverged = false;
};

// Masks spans independently per modality, predicts k-means cluster ids of the
// audio features at masked frames from the encoder output. Returns a model
// whose frontends and encoder are initialized; the decoder stays fresh.
PretrainResult av_pretrain(ModelParams& model, const Corpus& corpus,
                           const PretrainConfig& cfg,
                           const std::string& run_dir = "");

// Copies frontends + encoder (the pretrained groups) into a fresh model.
void transfer_encoder_init(ModelParams& target, const ModelParams& pretrained);

}  // namespace avts
