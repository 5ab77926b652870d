#include "d2dmoe/clustering.hpp"

#include <algorithm>
#include <limits>
#include <random>

#include "d2dmoe/hash.hpp"
#include "d2dmoe/linalg.hpp"

namespace d2dmoe {

namespace {

using Matrix = std::vector<double>;  // row-major

struct Points {
  std::size_t n = 0;
  std::size_t d = 0;
  Matrix x;
  double at(std::size_t i, std::size_t j) const { return x[i * d + j]; }
};

Points to_points(const Tensor& t) {
  if (t.rank() != 2) throw InputError("balanced_kmeans: points must be a matrix, got " + ad::shape_str(t.shape()));
  Points p{t.dim(0), t.dim(1), Matrix(t.data().begin(), t.data().end())};
  return p;
}

Matrix centroids_of(const Points& p, const std::vector<int>& assign, int k) {
  Matrix c(static_cast<std::size_t>(k) * p.d, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < p.n; ++i) {
    const auto a = static_cast<std::size_t>(assign[i]);
    ++count[a];
    for (std::size_t j = 0; j < p.d; ++j) c[a * p.d + j] += p.at(i, j);
  }
  for (int a = 0; a < k; ++a) {
    for (std::size_t j = 0; j < p.d; ++j) c[a * p.d + j] /= static_cast<double>(count[a]);
  }
  return c;
}

double sq_dist(const Points& p, std::size_t i, const Matrix& c, std::size_t a) {
  double s = 0.0;
  for (std::size_t j = 0; j < p.d; ++j) {
    const double t = p.at(i, j) - c[a * p.d + j];
    s += t * t;
  }
  return s;
}

double objective_of(const Points& p, const std::vector<int>& assign, int k) {
  const Matrix c = centroids_of(p, assign, k);
  double s = 0.0;
  for (std::size_t i = 0; i < p.n; ++i) s += sq_dist(p, i, c, static_cast<std::size_t>(assign[i]));
  return s;
}

Matrix kmeanspp(const Points& p, int k, std::mt19937_64& rng) {
  Matrix c(static_cast<std::size_t>(k) * p.d);
  std::uniform_int_distribution<std::size_t> pick(0, p.n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t first = pick(rng);
  std::copy_n(p.x.begin() + static_cast<std::ptrdiff_t>(first * p.d), p.d, c.begin());
  std::vector<double> d2(p.n, std::numeric_limits<double>::infinity());
  for (int a = 1; a < k; ++a) {
    double total = 0.0;
    for (std::size_t i = 0; i < p.n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(p, i, c, static_cast<std::size_t>(a - 1)));
      total += d2[i];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      double r = unit(rng) * total;
      for (chosen = 0; chosen + 1 < p.n; ++chosen) {
        r -= d2[chosen];
        if (r < 0.0) break;
      }
    } else {
      chosen = pick(rng);
    }
    std::copy_n(p.x.begin() + static_cast<std::ptrdiff_t>(chosen * p.d), p.d,
                c.begin() + static_cast<std::ptrdiff_t>(a * p.d));
  }
  return c;
}

// Exact balanced assignment: every cluster owns `size` identical slots.
std::vector<int> balanced_assign(const Points& p, const Matrix& c, int k) {
  const std::size_t size = p.n / static_cast<std::size_t>(k);
  std::vector<double> dist(p.n * k);
  for (std::size_t i = 0; i < p.n; ++i) {
    for (int a = 0; a < k; ++a) dist[i * k + a] = sq_dist(p, i, c, static_cast<std::size_t>(a));
  }
  Matrix cost(p.n * p.n);
  for (std::size_t i = 0; i < p.n; ++i) {
    for (std::size_t s = 0; s < p.n; ++s) cost[i * p.n + s] = dist[i * k + s / size];
  }
  const std::vector<int> slot = hungarian(cost, p.n);
  std::vector<int> assign(p.n);
  for (std::size_t i = 0; i < p.n; ++i) assign[i] = static_cast<int>(static_cast<std::size_t>(slot[i]) / size);
  return assign;
}

// First-improvement pairwise swaps under the exact change in objective.
int swap_refine(const Points& p, std::vector<int>& assign, int k) {
  const std::size_t n = p.n;
  const double size = static_cast<double>(n / static_cast<std::size_t>(k));
  Matrix gram(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < p.d; ++t) s += p.at(i, t) * p.at(j, t);
      gram[i * n + j] = gram[j * n + i] = s;
    }
  }
  // g[i*k + a] = x_i . S_a, with S_a the member sum of cluster a
  Matrix g(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) g[i * k + assign[j]] += gram[i * n + j];
  }
  int swaps = 0;
  const double tol = 1e-12 * std::max(1.0, objective_of(p, assign, k));
  bool improved = true;
  while (improved) {
    improved = false;
    for (std::size_t x = 0; x < n; ++x) {
      for (std::size_t y = x + 1; y < n; ++y) {
        const int a = assign[x];
        const int b = assign[y];
        if (a == b) continue;
        const double dxy = gram[x * n + x] + gram[y * n + y] - 2.0 * gram[x * n + y];
        const double delta =
            -(2.0 * (g[y * k + a] - g[x * k + a] + g[x * k + b] - g[y * k + b]) + 2.0 * dxy) / size;
        if (delta < -tol) {
          for (std::size_t i = 0; i < n; ++i) {
            const double diff = gram[i * n + y] - gram[i * n + x];
            g[i * k + a] += diff;
            g[i * k + b] -= diff;
          }
          std::swap(assign[x], assign[y]);
          ++swaps;
          improved = true;
        }
      }
    }
  }
  return swaps;
}

KMeansResult run_once(const Points& p, int k, std::uint64_t seed, const KMeansOptions& opts) {
  std::mt19937_64 rng(seed);
  KMeansResult r;
  Matrix c = kmeanspp(p, k, rng);
  r.assignment = balanced_assign(p, c, k);
  r.objective = objective_of(p, r.assignment, k);
  r.history.push_back(r.objective);
  while (r.iterations < opts.max_iters) {
    bool changed = false;
    while (r.iterations < opts.max_iters) {
      ++r.iterations;
      c = centroids_of(p, r.assignment, k);
      std::vector<int> next = balanced_assign(p, c, k);
      if (next == r.assignment) break;
      const double obj = objective_of(p, next, k);
      if (!(obj < r.objective)) break;  // equal-cost reshuffle: treat as converged
      r.assignment = std::move(next);
      r.objective = obj;
      r.history.push_back(obj);
      changed = true;
    }
    if (!opts.swap_refine) break;
    const int s = swap_refine(p, r.assignment, k);
    if (s > 0) {
      r.swaps += s;
      r.objective = objective_of(p, r.assignment, k);
      r.history.push_back(r.objective);
      changed = true;
    }
    if (!changed || s == 0) break;
  }
  return r;
}

}  // namespace

std::vector<int> hungarian(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw DimensionError("hungarian: cost matrix is not square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; p[j] is the row matched to column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      const double* row = cost.data() + (i0 - 1) * n;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> col(n);
  for (std::size_t j = 1; j <= n; ++j) col[p[j] - 1] = static_cast<int>(j - 1);
  return col;
}

double balanced_objective(const Tensor& points, const std::vector<int>& assignment, int n_clusters) {
  const Points p = to_points(points);
  if (assignment.size() != p.n) throw DimensionError("balanced_objective: assignment length mismatch");
  return objective_of(p, assignment, n_clusters);
}

KMeansResult balanced_kmeans(const Tensor& points, int n_clusters, std::uint64_t seed, const KMeansOptions& opts) {
  const Points p = to_points(points);
  if (n_clusters < 1) throw InputError("balanced_kmeans: n_clusters must be >= 1");
  const auto k = static_cast<std::size_t>(n_clusters);
  if (k > p.n) {
    throw InputError("balanced_kmeans: " + std::to_string(k) + " clusters for " + std::to_string(p.n) + " points");
  }
  if (p.n % k != 0) {
    throw InputError("balanced_kmeans: " + std::to_string(p.n) + " points not divisible into " + std::to_string(k) +
                     " equal clusters");
  }
  if (k == 1) {
    KMeansResult r;
    r.assignment.assign(p.n, 0);
    r.objective = objective_of(p, r.assignment, 1);
    r.history = {r.objective};
    return r;
  }
  KMeansResult best;
  for (int restart = 0; restart < std::max(1, opts.n_init); ++restart) {
    KMeansResult r = run_once(p, n_clusters, restart == 0 ? seed : mix64(seed + static_cast<std::uint64_t>(restart)), opts);
    if (restart == 0 || r.objective < best.objective) best = std::move(r);
  }
  return best;
}

std::vector<int> ExpertPartition::members(int expert) const {
  std::vector<int> m;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] == expert) m.push_back(static_cast<int>(i));
  }
  return m;
}

void ExpertPartition::validate(std::size_t hidden) const {
  if (n_experts < 1) throw ValidationError("partition: n_experts must be >= 1");
  if (assignment.size() != hidden) {
    throw ValidationError("partition: assignment covers " + std::to_string(assignment.size()) + " neurons, FFN has " +
                          std::to_string(hidden));
  }
  if (static_cast<std::size_t>(n_experts) * static_cast<std::size_t>(expert_size) != hidden) {
    throw ValidationError("partition: n_experts * expert_size != hidden width");
  }
  std::vector<int> count(n_experts, 0);
  for (int a : assignment) {
    if (a < 0 || a >= n_experts) throw ValidationError("partition: expert id out of range");
    ++count[a];
  }
  for (int c : count) {
    if (c != expert_size) throw ValidationError("partition: unbalanced expert sizes");
  }
}

Json to_json(const ExpertPartition& p) {
  return Json{{"layer", p.layer}, {"n_experts", p.n_experts}, {"expert_size", p.expert_size}, {"assignment", p.assignment}};
}

ExpertPartition partition_from_json(const Json& j) {
  ExpertPartition p;
  p.layer = j.at("layer").get<int>();
  p.n_experts = j.at("n_experts").get<int>();
  p.expert_size = j.at("expert_size").get<int>();
  p.assignment = j.at("assignment").get<std::vector<int>>();
  return p;
}

ExpertSlices slice_ffn(const FfnWeights& ffn, const ExpertPartition& partition) {
  ffn.check();
  partition.validate(ffn.hidden());
  const std::size_t d = ffn.model_dim();
  const auto s = static_cast<std::size_t>(partition.expert_size);
  ExpertSlices out;
  out.b2 = ffn.b2;
  out.source = fingerprint(ffn);
  for (int e = 0; e < partition.n_experts; ++e) {
    const std::vector<int> idx = partition.members(e);
    ExpertSlice sl{Tensor({d, s}), Tensor({s}), Tensor({s, d}), std::nullopt};
    if (ffn.Wg) sl.Wg = Tensor({d, s});
    for (std::size_t c = 0; c < s; ++c) {
      const auto src = static_cast<std::size_t>(idx[c]);
      for (std::size_t r = 0; r < d; ++r) {
        sl.W1(r, c) = ffn.W1(r, src);
        if (ffn.Wg) (*sl.Wg)(r, c) = (*ffn.Wg)(r, src);
      }
      sl.b1[c] = ffn.b1[src];
      for (std::size_t r = 0; r < d; ++r) sl.W2(c, r) = ffn.W2(src, r);
    }
    out.experts.push_back(std::move(sl));
  }
  return out;
}

SplitResult split_ffn(const FfnWeights& ffn, int n_experts, std::uint64_t seed, const KMeansOptions& opts) {
  ffn.check();
  const Tensor& source = ffn.Wg ? *ffn.Wg : ffn.W1;
  // neuron j's feature vector is column j of the input projection
  const std::size_t d = source.dim(0);
  const std::size_t h = source.dim(1);
  Tensor features({h, d});
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < h; ++c) features(c, r) = source(r, c);
  }
  SplitResult out;
  out.kmeans = balanced_kmeans(features, n_experts, seed, opts);
  out.partition.n_experts = n_experts;
  out.partition.expert_size = static_cast<int>(h) / n_experts;
  out.partition.assignment = out.kmeans.assignment;
  out.slices = slice_ffn(ffn, out.partition);
  return out;
}

Tensor expert_output(const ExpertSlice& slice, const Tensor& z, Activation act) {
  return ffn_core(slice.view(), z, act);
}

double reconstruct_check(const FfnWeights& ffn, const ExpertSlices& slices, const Tensor& z, Activation act) {
  if (slices.source != fingerprint(ffn)) {
    throw ContractError("reconstruct_check: slices were not derived from this FFN");
  }
  const Tensor dense = ffn_apply(ffn, z, act);
  Tensor sum(dense.shape());
  for (const auto& e : slices.experts) {
    const Tensor y = expert_output(e, z, act);
    for (std::size_t i = 0; i < sum.numel(); ++i) sum[i] += y[i];
  }
  ad::add_bias_rows(sum, slices.b2);
  return ad::max_abs_diff(dense, sum);
}

}  // namespace d2dmoe
