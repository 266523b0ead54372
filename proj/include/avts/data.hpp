#pragma once

#include <optional>
#include <string>
#include <vector>

#include "avts/features.hpp"
#include "avts/tensor.hpp"
#include "avts/units.hpp"

namespace avts {

enum class Split { train, valid, test };
Split parse_split(const std::string& s);
std::string to_string(Split s);

struct Utterance {
  std::string id;
  std::optional<Waveform> audio;
  std::optional<Tensor> video;  // T x video_dim at 25 Hz
  UnitSeq units;                // reduced target units
  std::vector<int> source_symbols;  // generator metadata; not serialized
  Split split = Split::train;
  // relative paths, kept for canonical manifest round trips
  std::string audio_rel, video_rel, units_rel;
};

struct CorpusSpec {
  int n_train = 2000;
  int n_valid = 100;
  int n_test = 200;
  int source_vocab = 12;
  int viseme_groups = 5;  // many-to-one; identity when == source_vocab
  int vocab = 64;         // unit inventory K
  int video_dim = 24;
  int min_len = 4, max_len = 9;   // symbols per utterance
  uint64_t seed = 1;
  uint64_t stream = 0;    // distinct utterance stream over shared tables
  bool audio_only = false;
  std::string hours_label = "200h";

  void validate() const;
};

// tiny | small | normal | teacher
CorpusSpec preset_spec(const std::string& name, uint64_t seed);

// Deterministic per-seed mapping tables. Audio tones identify each source
// symbol; video patterns identify only its viseme group.
struct CorpusTables {
  std::vector<UnitSeq> symbol_units;            // symbol -> unit word
  std::vector<int> viseme_of;                   // symbol -> group
  std::vector<std::pair<double, double>> tone_hz;
  std::vector<std::vector<double>> group_pattern;
  std::vector<double> init_w;                   // bigram grammar
  std::vector<std::vector<double>> trans_w;
};
CorpusTables make_tables(const CorpusSpec& spec);

// Reference translation: the local swap rule over source symbols, then the
// symbol -> unit-word mapping, reduced.
UnitSeq oracle_translate(const CorpusTables& tables,
                         const std::vector<int>& symbols);

struct Corpus {
  CorpusSpec spec;
  CorpusTables tables;  // empty when loaded from disk
  std::vector<Utterance> utts;

  std::vector<int> split_indices(Split s) const;
};

Corpus generate(const CorpusSpec& spec);

constexpr int kFramesPerSymbol = 3;      // 120 ms at 25 Hz
constexpr int kSamplesPerSymbol = 1920;  // 120 ms at 16 kHz

// Corpus directory: manifest.tsv + audio/ video/ units/ + corpus.meta.
// Manifest columns: id<TAB>audio_path<TAB>video_path<TAB>units_path<TAB>split,
// paths relative to the manifest, "-" for an absent stream.
void write_corpus(Corpus& corpus, const std::string& dir);
void write_manifest(const Corpus& corpus, const std::string& path);
Corpus load_manifest(const std::string& manifest_path);

}  // namespace avts
