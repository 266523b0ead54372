#pragma once

#include <string>
#include <vector>

#include "avts/rng.hpp"
#include "avts/tensor.hpp"

namespace avts {

using UnitSeq = std::vector<int>;

struct Codebook {
  Tensor centroids;  // K x D
  std::vector<double> inertia_history;
  int k() const { return centroids.rows(); }
  int dim() const { return centroids.cols(); }
};

// Lloyd iterations with k-means++ seeding; deterministic given seed. Empty
// clusters are reseeded to the point farthest from its assigned centroid.
// Inertia is recorded after every assignment pass and never increases.
Codebook kmeans(const Tensor& points, int k, int max_iters, uint64_t seed);

// Nearest centroid per frame by squared Euclidean distance, ties to the
// lower id.
UnitSeq quantize(const Tensor& features, const Codebook& cb);

// Collapses consecutive duplicates.
UnitSeq reduce(const UnitSeq& units);

// Unit files: UTF-8, one utterance per line, space-separated decimal ids.
void write_units(const std::string& path, const std::vector<UnitSeq>& seqs);
std::vector<UnitSeq> read_units(const std::string& path);

void write_codebook(const std::string& path, const Codebook& cb);
Codebook read_codebook(const std::string& path);

}  // namespace avts
