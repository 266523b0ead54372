#include "avts/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "avts/rng.hpp"

namespace fs = std::filesystem;

namespace avts {

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw std::runtime_error("unknown split: " + s);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

void CorpusSpec::validate() const {
  if (n_train < 0 || n_valid < 0 || n_test < 0 || n_train + n_valid + n_test == 0)
    throw std::invalid_argument("corpus: empty spec");
  if (source_vocab < 2) throw std::invalid_argument("corpus: source_vocab < 2");
  if (viseme_groups < 1 || viseme_groups > source_vocab)
    throw std::invalid_argument("corpus: viseme_groups must be in [1, source_vocab]");
  if (vocab < 2) throw std::invalid_argument("corpus: unit vocab < 2");
  if (video_dim < 1) throw std::invalid_argument("corpus: video_dim < 1");
  if (min_len < 1 || max_len < min_len)
    throw std::invalid_argument("corpus: bad length range");
}

CorpusSpec preset_spec(const std::string& name, uint64_t seed) {
  CorpusSpec s;
  s.seed = seed;
  if (name == "normal") {
    s.n_train = 2000;
    s.n_valid = 100;
    s.n_test = 200;
    s.hours_label = "200h";
  } else if (name == "small") {
    s.n_train = 300;
    s.n_valid = 60;
    s.n_test = 120;
    s.hours_label = "30h";
  } else if (name == "tiny") {
    s.n_train = 100;
    s.n_valid = 40;
    s.n_test = 100;
    s.hours_label = "10h";
  } else if (name == "teacher") {
    s.n_train = 2000;
    s.n_valid = 100;
    s.n_test = 200;
    s.hours_label = "audio";
    s.audio_only = true;
    s.stream = 1;  // same tables as the AV corpora, different utterances
  } else {
    throw std::invalid_argument("unknown preset: " + name);
  }
  return s;
}

CorpusTables make_tables(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(Rng::mix(spec.seed, 0x7ab1e5));
  CorpusTables t;
  const int s = spec.source_vocab;

  t.viseme_of.resize(s);
  for (int i = 0; i < s; ++i) t.viseme_of[i] = i % spec.viseme_groups;

  // distinct unit words of length 2-3
  std::set<UnitSeq> used;
  for (int i = 0; i < s; ++i) {
    UnitSeq word;
    do {
      word.clear();
      const int len = 2 + rng.uniform_int(2);
      for (int j = 0; j < len; ++j) word.push_back(rng.uniform_int(spec.vocab));
    } while (used.count(word));
    used.insert(word);
    t.symbol_units.push_back(word);
  }

  t.tone_hz.resize(s);
  for (int i = 0; i < s; ++i)
    t.tone_hz[i] = {300.0 + 120.0 * i, 2300.0 + 90.0 * i};

  t.group_pattern.resize(spec.viseme_groups);
  for (int g = 0; g < spec.viseme_groups; ++g) {
    std::vector<double> p(spec.video_dim);
    double norm = 0.0;
    for (double& v : p) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : p) v = v / norm * 1.2;
    t.group_pattern[g] = std::move(p);
  }

  // skewed bigram grammar
  t.init_w.resize(s);
  double total = 0.0;
  for (double& w : t.init_w) {
    const double u = rng.uniform01();
    w = u * u;
    total += w;
  }
  for (double& w : t.init_w) w /= total;
  t.trans_w.resize(s);
  for (int i = 0; i < s; ++i) {
    t.trans_w[i].resize(s);
    double tt = 0.0;
    for (double& w : t.trans_w[i]) {
      const double u = rng.uniform01();
      w = u * u * u;
      tt += w;
    }
    for (double& w : t.trans_w[i]) w /= tt;
  }
  return t;
}

UnitSeq oracle_translate(const CorpusTables& tables,
                         const std::vector<int>& symbols) {
  // local reorder: adjacent pairs with (a+b) % 4 == 0 swap their unit words
  UnitSeq raw;
  size_t i = 0;
  while (i < symbols.size()) {
    if (i + 1 < symbols.size() && (symbols[i] + symbols[i + 1]) % 4 == 0) {
      for (int u : tables.symbol_units[symbols[i + 1]]) raw.push_back(u);
      for (int u : tables.symbol_units[symbols[i]]) raw.push_back(u);
      i += 2;
    } else {
      for (int u : tables.symbol_units[symbols[i]]) raw.push_back(u);
      i += 1;
    }
  }
  return reduce(raw);
}

namespace {

int sample_weighted(const std::vector<double>& w, Rng& rng) {
  double r = rng.uniform01();
  for (size_t i = 0; i < w.size(); ++i) {
    r -= w[i];
    if (r <= 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(w.size()) - 1;
}

Waveform render_audio(const CorpusTables& tables, const std::vector<int>& symbols,
                      Rng& rng) {
  const double sr = 16000.0;
  const int ramp = 80;  // 5 ms attack/decay
  Waveform w;
  w.sample_rate = sr;
  w.samples.assign(symbols.size() * kSamplesPerSymbol, 0.0);
  const double utt_jitter = rng.normal(1.0, 0.02);
  size_t pos = 0;
  for (int s : symbols) {
    const double j = utt_jitter * rng.normal(1.0, 0.005);
    const double f1 = tables.tone_hz[s].first * j;
    const double f2 = tables.tone_hz[s].second * j;
    const double amp = rng.normal(1.0, 0.05);
    for (int i = 0; i < kSamplesPerSymbol; ++i) {
      double env = 1.0;
      if (i < ramp) env = i / static_cast<double>(ramp);
      if (i >= kSamplesPerSymbol - ramp)
        env = (kSamplesPerSymbol - i) / static_cast<double>(ramp);
      const double tt = i / sr;
      w.samples[pos + i] =
          env * amp *
              (0.9 * std::sin(2.0 * M_PI * f1 * tt) +
               0.5 * std::sin(2.0 * M_PI * f2 * tt)) +
          0.01 * rng.normal();
    }
    pos += kSamplesPerSymbol;
  }
  return w;
}

Tensor render_video(const CorpusTables& tables, const CorpusSpec& spec,
                    const std::vector<int>& symbols, Rng& rng) {
  const int t = static_cast<int>(symbols.size()) * kFramesPerSymbol;
  Tensor v = Tensor::zeros({t, spec.video_dim});
  for (size_t si = 0; si < symbols.size(); ++si) {
    const std::vector<double>& p = tables.group_pattern[tables.viseme_of[symbols[si]]];
    for (int f = 0; f < kFramesPerSymbol; ++f) {
      const int row = static_cast<int>(si) * kFramesPerSymbol + f;
      for (int c = 0; c < spec.video_dim; ++c)
        v.at(row, c) = p[c] + 0.35 * rng.normal();
    }
  }
  return v;
}

Utterance make_utterance(const CorpusSpec& spec, const CorpusTables& tables,
                         Split split, const std::string& id, uint64_t utt_seed) {
  Rng rng(utt_seed);
  const int len = spec.min_len + rng.uniform_int(spec.max_len - spec.min_len + 1);
  std::vector<int> symbols(len);
  symbols[0] = sample_weighted(tables.init_w, rng);
  for (int i = 1; i < len; ++i)
    symbols[i] = sample_weighted(tables.trans_w[symbols[i - 1]], rng);

  Utterance u;
  u.id = id;
  u.split = split;
  u.source_symbols = symbols;
  u.units = oracle_translate(tables, symbols);
  u.audio = render_audio(tables, symbols, rng);
  if (!spec.audio_only) u.video = render_video(tables, spec, symbols, rng);
  return u;
}

}  // namespace

std::vector<int> Corpus::split_indices(Split s) const {
  std::vector<int> idx;
  for (size_t i = 0; i < utts.size(); ++i)
    if (utts[i].split == s) idx.push_back(static_cast<int>(i));
  return idx;
}

Corpus generate(const CorpusSpec& spec) {
  spec.validate();
  Corpus c;
  c.spec = spec;
  c.tables = make_tables(spec);
  const uint64_t base = Rng::mix(spec.seed, Rng::mix(0x5eed, spec.stream));
  uint64_t counter = 0;
  auto emit = [&](Split split, const char* prefix, int count) {
    for (int i = 0; i < count; ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "%s_%05d", prefix, i);
      c.utts.push_back(make_utterance(spec, c.tables, split, id,
                                      Rng::mix(base, ++counter)));
    }
  };
  emit(Split::train, "train", spec.n_train);
  emit(Split::valid, "valid", spec.n_valid);
  emit(Split::test, "test", spec.n_test);
  return c;
}

// ---- disk layout ----

void write_manifest(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_manifest: cannot open " + path);
  os << "id\taudio_path\tvideo_path\tunits_path\tsplit\n";
  for (const Utterance& u : corpus.utts) {
    os << u.id << '\t' << (u.audio_rel.empty() ? "-" : u.audio_rel) << '\t'
       << (u.video_rel.empty() ? "-" : u.video_rel) << '\t' << u.units_rel
       << '\t' << to_string(u.split) << '\n';
  }
}

void write_corpus(Corpus& corpus, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "audio");
  fs::create_directories(fs::path(dir) / "video");
  fs::create_directories(fs::path(dir) / "units");
  for (Utterance& u : corpus.utts) {
    if (u.audio) {
      u.audio_rel = "audio/" + u.id + ".avtf";
      write_wave_avtf((fs::path(dir) / u.audio_rel).string(), *u.audio);
    }
    if (u.video) {
      u.video_rel = "video/" + u.id + ".avtf";
      write_avtf((fs::path(dir) / u.video_rel).string(), *u.video, 25000);
    }
    u.units_rel = "units/" + u.id + ".units";
    write_units((fs::path(dir) / u.units_rel).string(), {u.units});
  }
  write_manifest(corpus, (fs::path(dir) / "manifest.tsv").string());

  std::ofstream meta((fs::path(dir) / "corpus.meta").string(), std::ios::binary);
  meta << "seed=" << corpus.spec.seed << "\nstream=" << corpus.spec.stream
       << "\nsource_vocab=" << corpus.spec.source_vocab
       << "\nviseme_groups=" << corpus.spec.viseme_groups
       << "\nvocab=" << corpus.spec.vocab
       << "\nvideo_dim=" << corpus.spec.video_dim
       << "\nhours_label=" << corpus.spec.hours_label
       << "\naudio_only=" << (corpus.spec.audio_only ? 1 : 0) << "\n";
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return out;
}

}  // namespace

Corpus load_manifest(const std::string& manifest_path) {
  std::ifstream is(manifest_path, std::ios::binary);
  if (!is)
    throw std::runtime_error("load_manifest: missing file " + manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();
  Corpus c;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) continue;  // header
    if (line.empty()) continue;
    const std::vector<std::string> cols = split_tabs(line);
    if (cols.size() != 5)
      throw std::runtime_error("load_manifest: line " + std::to_string(line_no) +
                               ": expected 5 columns, got " +
                               std::to_string(cols.size()));
    Utterance u;
    u.id = cols[0];
    u.split = [&] {
      try {
        return parse_split(cols[4]);
      } catch (const std::exception&) {
        throw std::runtime_error("load_manifest: line " + std::to_string(line_no) +
                                 ": unknown split '" + cols[4] + "'");
      }
    }();
    auto resolve = [&](const std::string& rel, const char* what) {
      const fs::path p = root / rel;
      if (!fs::exists(p))
        throw std::runtime_error("load_manifest: line " + std::to_string(line_no) +
                                 ": dangling " + what + " path " + p.string());
      return p.string();
    };
    if (cols[1] != "-") {
      u.audio_rel = cols[1];
      u.audio = read_wave_avtf(resolve(cols[1], "audio"));
    }
    if (cols[2] != "-") {
      u.video_rel = cols[2];
      u.video = read_avtf(resolve(cols[2], "video")).mat;
    }
    u.units_rel = cols[3];
    const std::vector<UnitSeq> seqs = read_units(resolve(cols[3], "units"));
    if (seqs.size() != 1)
      throw std::runtime_error("load_manifest: line " + std::to_string(line_no) +
                               ": units file must hold one utterance");
    u.units = seqs[0];
    c.utts.push_back(std::move(u));
  }
  return c;
}

}  // namespace avts
