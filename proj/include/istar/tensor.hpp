#pragma once

// Minimal dense-tensor library with reverse-mode gradient accumulation.
// Define-by-run: every forward op appends a node to a fresh graph; backward
// walks it once. 64-bit floats throughout so identity tests hold tightly.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace istar::tensor {

struct Tensor;
using Ptr = std::shared_ptr<Tensor>;

struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<int> shape;
    std::vector<double> values;        // row-major
    std::vector<double> grad;          // same length as values when live
    bool requires_grad = false;
    bool grad_live = false;            // set once backward reached this leaf
    bool backward_ran = false;         // guards repeated backward on one graph

    std::vector<Ptr> parents;
    std::function<void(Tensor&)> backward_fn;  // pulls grad from this into parents
    const char* op = "";

    Tensor(std::vector<int> s, std::vector<double> v, bool req);

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
    bool is_scalar() const { return numel() == 1; }
    double scalar() const;
    void accumulate_grad(const double* g, std::int64_t n);
    void zero_grad();
};

std::int64_t shape_numel(const std::vector<int>& shape);

// --- leaf constructors -----------------------------------------------------

Ptr constant(std::vector<int> shape, double value);
Ptr zeros(std::vector<int> shape);
Ptr ones(std::vector<int> shape);
Ptr from_values(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
Ptr scalar_tensor(double value);
Ptr uniform(std::vector<int> shape, double lo, double hi, std::mt19937_64& rng,
            bool requires_grad = true);

// When a NoGradGuard is alive, ops produce plain constants (no graph nodes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

// --- ops --------------------------------------------------------------------

Ptr add(const Ptr& a, const Ptr& b);
Ptr sub(const Ptr& a, const Ptr& b);
Ptr mul(const Ptr& a, const Ptr& b);
Ptr neg(const Ptr& a);
Ptr scale(const Ptr& a, double c);
Ptr add_scalar(const Ptr& a, double c);

// output = input . weight + bias  (input [B,I], weight [I,O], bias [O])
Ptr affine(const Ptr& input, const Ptr& weight, const Ptr& bias);
Ptr tanh_op(const Ptr& a);
Ptr exp_op(const Ptr& a);
// log(1 + e^x), numerically stable
Ptr softplus(const Ptr& a);
// log-softmax along `axis`; rejects non-finite input
Ptr log_softmax(const Ptr& logits, int axis);

// rows of an embedding table: out[r,:] = table[ids[r],:]
Ptr gather_rows(const Ptr& table, const std::vector<int>& ids);
// out[r,:] = sum_j embed[prefix[r][j],:] + pos[position[r],:]
Ptr prefix_embed(const Ptr& embed, const Ptr& pos,
                 const std::vector<std::vector<int>>& prefixes,
                 const std::vector<int>& positions);
Ptr concat_cols(const Ptr& a, const Ptr& b);
// out[r] = a[r, idx[r]]
Ptr pick(const Ptr& a, const std::vector<int>& idx);
// out[s] = sum over rows r with seg[r]==s of a[r]
Ptr segment_sum(const Ptr& a, const std::vector<int>& seg, int n_segments);

Ptr sum(const Ptr& a);
Ptr mean(const Ptr& a);
Ptr minimum(const Ptr& a, const Ptr& b);
Ptr clamp_const(const Ptr& a, double lo, double hi);

// Accumulates gradients into every reachable leaf. The loss must be scalar;
// running backward twice on the same graph is rejected.
void backward(const Ptr& loss);

// --- parameters & optimizer ---------------------------------------------------

struct AdamwConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class ParameterSet {
public:
    ParameterSet() = default;

    Ptr add(const std::string& name, Ptr t);
    Ptr at(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::vector<std::string> names() const;  // sorted, deterministic
    std::int64_t total_parameters() const;

    void zero_grad();
    // Deep copy of values; fresh (zeroed) optimizer state unless with_opt_state.
    ParameterSet clone(bool with_opt_state = false) const;
    bool values_equal(const ParameterSet& other) const;  // bitwise

    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };

    std::int64_t step_count() const { return step_count_; }

    friend void adamw_step(ParameterSet& params, const AdamwConfig& cfg);
    friend struct CheckpointIo;

    const std::map<std::string, Ptr>& entries() const { return params_; }

private:
    std::map<std::string, Ptr> params_;        // ordered: deterministic iteration
    std::map<std::string, Moments> moments_;
    std::int64_t step_count_ = 0;
};

// Decoupled-weight-decay Adam over every parameter of the set.
// Requires all gradients populated; leaves gradients untouched.
void adamw_step(ParameterSet& params, const AdamwConfig& cfg);

// --- finite-difference oracle -------------------------------------------------

struct FiniteDiffOptions {
    int max_coords = 48;     // coordinates sampled across all parameters
    double step = 1e-5;
    std::uint64_t seed = 0;
};

// Central-difference check of d loss / d params against the analytic backward
// pass. Returns max over sampled coordinates of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(ParameterSet& params, const std::function<Ptr()>& loss_fn,
                         const FiniteDiffOptions& opts = {});

// --- checkpoints ---------------------------------------------------------------

// Self-describing text checkpoint; doubles stored as hex bit patterns so a
// round trip is bitwise exact. Optimizer state optional.
void save_checkpoint(const std::string& path, const ParameterSet& params,
                     const std::map<std::string, std::string>& meta,
                     bool with_opt_state = false);

struct Checkpoint {
    ParameterSet params;
    std::map<std::string, std::string> meta;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace istar::tensor
