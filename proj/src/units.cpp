#include "avts/units.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "avts/features.hpp"

namespace avts {

namespace {

double sq_dist(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

}  // namespace

Codebook kmeans(const Tensor& points, int k, int max_iters, uint64_t seed) {
  if (points.ndim() != 2 || points.rows() < 1)
    throw std::invalid_argument("kmeans: need a non-empty N x D matrix");
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  const int n = points.rows(), d = points.cols();
  const double* pts = points.data->data();
  Rng rng(seed);

  // k-means++ seeding
  std::vector<int> chosen;
  chosen.push_back(rng.uniform_int(n));
  std::vector<double> dist2(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(chosen.size()) < k) {
    const double* last = pts + static_cast<size_t>(chosen.back()) * d;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      dist2[i] = std::min(dist2[i], sq_dist(pts + static_cast<size_t>(i) * d, last, d));
      total += dist2[i];
    }
    int pick;
    if (total <= 0.0) {
      pick = rng.uniform_int(n);  // all mass on existing centers (duplicates)
    } else {
      double r = rng.uniform01() * total;
      pick = n - 1;
      for (int i = 0; i < n; ++i) {
        r -= dist2[i];
        if (r <= 0.0) {
          pick = i;
          break;
        }
      }
    }
    chosen.push_back(pick);
  }

  Tensor centroids = Tensor::zeros({k, d});
  for (int c = 0; c < k; ++c)
    std::copy(pts + static_cast<size_t>(chosen[c]) * d,
              pts + static_cast<size_t>(chosen[c] + 1) * d,
              centroids.data->begin() + static_cast<size_t>(c) * d);

  Codebook cb;
  std::vector<int> assign(n, -1);
  std::vector<int> counts(k);
  for (int iter = 0; iter < max_iters; ++iter) {
    // assignment
    bool changed = false;
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) {
      const double* p = pts + static_cast<size_t>(i) * d;
      int best = 0;
      double bestd = sq_dist(p, centroids.data->data(), d);
      for (int c = 1; c < k; ++c) {
        const double dd = sq_dist(p, centroids.data->data() + static_cast<size_t>(c) * d, d);
        if (dd < bestd) {
          bestd = dd;
          best = c;
        }
      }
      inertia += bestd;
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    cb.inertia_history.push_back(inertia);
    if (!changed && iter > 0) break;

    // update
    std::fill(counts.begin(), counts.end(), 0);
    std::fill(centroids.data->begin(), centroids.data->end(), 0.0);
    for (int i = 0; i < n; ++i) {
      counts[assign[i]]++;
      double* crow = centroids.data->data() + static_cast<size_t>(assign[i]) * d;
      const double* p = pts + static_cast<size_t>(i) * d;
      for (int j = 0; j < d; ++j) crow[j] += p[j];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        double* crow = centroids.data->data() + static_cast<size_t>(c) * d;
        for (int j = 0; j < d; ++j) crow[j] /= counts[c];
      }
    }
    // reseed empty clusters to the farthest point from its centroid
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      int far = 0;
      double fard = -1.0;
      for (int i = 0; i < n; ++i) {
        const double dd = sq_dist(pts + static_cast<size_t>(i) * d,
                                  centroids.data->data() +
                                      static_cast<size_t>(assign[i]) * d,
                                  d);
        if (dd > fard) {
          fard = dd;
          far = i;
        }
      }
      std::copy(pts + static_cast<size_t>(far) * d,
                pts + static_cast<size_t>(far + 1) * d,
                centroids.data->begin() + static_cast<size_t>(c) * d);
    }
  }
  cb.centroids = centroids;
  return cb;
}

UnitSeq quantize(const Tensor& features, const Codebook& cb) {
  if (features.ndim() != 2)
    throw std::invalid_argument("quantize: expected T x D matrix");
  if (features.cols() != cb.dim())
    throw std::invalid_argument("quantize: feature dim does not match codebook");
  const int t = features.rows(), d = features.cols(), k = cb.k();
  UnitSeq out(t);
  for (int i = 0; i < t; ++i) {
    const double* f = features.data->data() + static_cast<size_t>(i) * d;
    int best = 0;
    double bestd = sq_dist(f, cb.centroids.data->data(), d);
    for (int c = 1; c < k; ++c) {
      const double dd =
          sq_dist(f, cb.centroids.data->data() + static_cast<size_t>(c) * d, d);
      if (dd < bestd) {  // strict: ties stay with the lower id
        bestd = dd;
        best = c;
      }
    }
    out[i] = best;
  }
  return out;
}

UnitSeq reduce(const UnitSeq& units) {
  UnitSeq out;
  for (int u : units)
    if (out.empty() || out.back() != u) out.push_back(u);
  return out;
}

void write_units(const std::string& path, const std::vector<UnitSeq>& seqs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_units: cannot open " + path);
  for (const UnitSeq& seq : seqs) {
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i) os << ' ';
      os << seq[i];
    }
    os << '\n';
  }
}

std::vector<UnitSeq> read_units(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_units: cannot open " + path);
  std::vector<UnitSeq> seqs;
  std::string line;
  while (std::getline(is, line)) {
    UnitSeq seq;
    std::istringstream ls(line);
    int v;
    while (ls >> v) seq.push_back(v);
    if (!ls.eof())
      throw std::runtime_error("read_units: malformed line " +
                               std::to_string(seqs.size() + 1) + " in " + path);
    seqs.push_back(std::move(seq));
  }
  return seqs;
}

void write_codebook(const std::string& path, const Codebook& cb) {
  write_avtf(path, cb.centroids, 0);
}

Codebook read_codebook(const std::string& path) {
  Codebook cb;
  cb.centroids = read_avtf(path).mat;
  return cb;
}

}  // namespace avts
