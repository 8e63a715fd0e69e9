#pragma once
// Minimal differentiable numeric core: dense matrices (double precision), a
// named parameter store, a single-use reverse-mode tape over the ops this
// project composes, Adam with linear learning-rate decay, a finite-difference
// gradient checker, and the tensor checkpoint format.

#include <Eigen/Core>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kgqr/common.hpp"

namespace kgqr::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct AdamConfig {
    double lr0 = 1e-3;
    int total_steps = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// lr at step t: lr0 * max(0, 1 - t/total_steps). t counts from 0.
double decayed_lr(const AdamConfig& cfg, int t);

struct Param {
    std::string name;
    Mat value;
    Mat grad;
    Mat m, v;  // Adam state
    int index = -1;
};

enum class Init { Zero, One, UniformFanIn };

class ParamStore {
public:
    explicit ParamStore(uint64_t seed) : rng_(seed) {}

    // Creates the parameter, or returns the existing one (shape-checked) when
    // the store was loaded from a checkpoint.
    Param& ensure(const std::string& name, int rows, int cols, Init init = Init::UniformFanIn);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool has(const std::string& name) const { return by_name_.count(name) > 0; }

    size_t size() const { return params_.size(); }
    Param& by_index(int i) { return *params_[static_cast<size_t>(i)]; }
    const Param& by_index(int i) const { return *params_[static_cast<size_t>(i)]; }

    void zero_grads();

    // Standard Adam with bias correction and linearly decayed lr.
    // Throws if any gradient is non-finite, naming the parameter.
    void adam_step(const AdamConfig& cfg, int t);

    // Checkpoint: plain-text header (meta lines + name/shape pairs) followed
    // by raw little-endian 32-bit floats.
    void save(const std::filesystem::path& p,
              const std::map<std::string, std::string>& meta = {}) const;
    static ParamStore load(const std::filesystem::path& p,
                           std::map<std::string, std::string>* meta = nullptr);

    uint64_t content_hash() const;

private:
    std::vector<std::unique_ptr<Param>> params_;
    std::map<std::string, int> by_name_;
    Rng rng_;
};

// Single-use computation tape. Node ids are indices; creation order is a
// topological order, so backward is a reverse sweep.
class Tape {
public:
    int size() const { return static_cast<int>(nodes_.size()); }
    const Mat& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    double scalar(int id) const;

    // Leaves.
    int constant(Mat v);
    int param(Param& p);
    int gather_param(Param& p, std::vector<int> rows);
    int gather_table(const Mat* table, const std::vector<int>& rows);  // fixed, no grad

    // Elementwise / structural ops.
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int affine(int a, double alpha, double beta);  // alpha*a + beta
    int add_rowvec(int a, int bias);               // bias is 1 x cols
    int mul_colvec(int a, int s);                  // s is rows x 1
    int matmul(int a, int b);
    int matmul_nt(int a, int b);  // A * B^T
    int transpose(int a);
    int concat_cols(int a, int b);
    int slice_cols(int a, int start, int len);
    int gather_rows(int a, std::vector<int> rows);
    int stack_rows(const std::vector<int>& parts);
    int pick(int a, int r, int c);

    // Nonlinearities.
    int leaky_relu(int a, double slope);  // slope 0 gives plain relu
    int elu(int a);
    int sqrt_eps(int a, double eps);  // sqrt(a + eps)

    // Reductions / normalizations.
    int row_softmax(int a);
    int mean_rows(int a);  // 1 x cols
    int sum_all(int a);    // 1 x 1
    int l2_norm_rows(int a);
    int layer_norm(int a, int gain, int bias);  // rowwise, eps 1e-5

    // Grouped softmax/sum over row segments (attention over ragged edge lists).
    int segment_softmax(int logits, const std::vector<int>& seg, int nseg);
    int segment_sum(int a, const std::vector<int>& seg, int nseg);
    int segment_mean(int a, const std::vector<int>& seg, int nseg);

    // -log softmax(scores.row(row))[target]; max-subtracted for stability.
    int nll_row(int scores, int row, int target);

    void backward(int root);                        // root must be 1x1; seeds 1
    void backward_seeded(int node, const Mat& seed);

private:
    struct Node {
        Mat value;
        Mat grad;  // empty until touched
        std::function<void()> bwd;
        bool needs_grad = false;
    };

    int push(Mat value, bool needs_grad, std::function<void()> bwd = nullptr);
    Mat& grad_of(int id);
    bool needs(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    void run_backward(int from);

    std::vector<Node> nodes_;
};

// Mat-level loss used directly by tests and simple callers:
// -log softmax(scores)[positive], with max subtraction.
double softmax_nll(const Mat& scores, int positive_index);

// Central finite differences vs analytic gradients over sampled coordinates.
// `loss` must rebuild its tape from current store values; when with_grad is
// true it must also run backward (grads are accumulated into the store).
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int coords_checked = 0;
};
GradCheckReport grad_check(ParamStore& store,
                           const std::function<double(bool with_grad)>& loss,
                           double eps = 1e-5, int coords_per_param = 6,
                           uint64_t seed = 0);

}  // namespace kgqr::nn
