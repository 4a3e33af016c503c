#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mjlab/adapters.hpp"
#include "mjlab/tensor.hpp"

namespace mjlab::oracle {

/// Adapters dW_e (d_out x d_in), token inputs H (d_in x T) and either a hard
/// assignment token -> expert or soft coefficients m (T x E).
struct RankInstance {
  std::vector<Tensor> adapters;
  Tensor inputs;
  std::vector<std::size_t> assignment;
  Tensor coeff;
};

struct RankComparison {
  std::size_t rank_mj = 0;
  std::size_t rank_peft = 0;
  std::size_t dim_c_all = 0;
  bool hypothesis_holds = false;  // every expert active and rank(dW_e H_e) == rank(dW_e)
};

struct SoftBound {
  std::size_t rank_mj = 0;
  std::size_t bound = 0;  // dim of the summed column spaces of activated experts
  bool holds = false;
};

/// U_peft = (sum_e dW_e) H against U_mj = [dW_1 H_1 ... dW_E H_E].
RankComparison rank_compare(const RankInstance& inst);
/// Column t of U_mj is sum_e m_te dW_e h_t.
SoftBound soft_rank_bound(const RankInstance& inst);

/// The two rank-1 adapters along e1 and -e2 with H = [e1 e1], one token each.
RankInstance cancelling_example();

RankInstance random_hard_instance(std::uint64_t seed);
RankInstance random_soft_instance(std::uint64_t seed);

struct SuiteResult {
  std::size_t instances = 0;
  std::size_t violations = 0;
  std::size_t strict = 0;  // instances with rank_mj > rank_peft
  std::size_t rejected = 0;  // draws discarded because the hypothesis failed
};

/// Randomised check of rank_mj >= rank_peft on instances satisfying the hypothesis.
SuiteResult expressivity_suite(std::size_t n, std::uint64_t seed);
/// Randomised check of rank_mj <= bound for soft top-k coefficients.
SuiteResult soft_bound_suite(std::size_t n, std::uint64_t seed);

enum class Family { Base, MoE, MonkeyJump };

struct ComplexityRow {
  std::string method;
  std::size_t trainable = 0;      // closed form, per block
  std::size_t router_params = 0;  // closed form, per block
  std::size_t enumerated_trainable = 0;
  std::size_t enumerated_router = 0;
  bool matches() const { return trainable == enumerated_trainable && router_params == enumerated_router; }
};

/// Closed-form per-block counts cross-checked against banks actually built
/// with E square d x d projections. E must be in [1, 7].
ComplexityRow complexity_table(AdapterKind kind, Family family, std::size_t e, std::size_t n, std::size_t d,
                               std::size_t r);

std::string method_name(AdapterKind kind, Family family);

nlohmann::ordered_json rank_report(std::size_t n, std::uint64_t seed);
nlohmann::ordered_json soft_report(std::size_t n, std::uint64_t seed);
nlohmann::ordered_json params_report();

}  // namespace mjlab::oracle
