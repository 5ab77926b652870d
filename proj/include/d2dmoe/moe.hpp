#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "d2dmoe/clustering.hpp"
#include "d2dmoe/routing.hpp"

namespace d2dmoe {

// An FFN (or a replaced attention projection) executed as experts selected
// per token by a router and a gate policy.
struct MoeLayer {
  SiteId site;
  FfnWeights source;  // the dense weights the experts were sliced from
  ExpertPartition partition;
  ExpertSlices slices;
  RouterWeights router;
  GatePolicy policy;
  Activation act = Activation::relu;

  static MoeLayer build(SiteId site, FfnWeights source, ExpertPartition partition, RouterWeights router,
                        GatePolicy policy, Activation act);

  int n_experts() const { return partition.n_experts; }
  // Throws ContractError when router, partition and slices disagree.
  void check() const;
};

struct SiteTrace {
  int n_experts = 0;
  std::vector<int> counts;  // selected experts per token, in token order
  std::vector<std::vector<std::uint8_t>> masks;  // filled when masks are recorded
  std::size_t all_zero_events = 0;

  std::int64_t total_selected() const;
  double mean_selected() const;
};

struct ExecutionTrace {
  std::map<SiteId, SiteTrace> sites;

  // Appends another trace's tokens site by site.
  void merge(const ExecutionTrace& other);
};

struct MoeRunOptions {
  const GatePolicy* policy_override = nullptr;
  bool record_masks = false;
};

// Per token: scores = router(z), mask = gate(scores),
// out = b2 + sum over selected experts of E_i(z). Expert outputs are not
// weighted by the scores.
Tensor moe_forward(const MoeLayer& layer, const Tensor& z, SiteTrace* trace = nullptr, const MoeRunOptions& opts = {});

}  // namespace d2dmoe
