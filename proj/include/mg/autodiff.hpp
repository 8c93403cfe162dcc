#pragma once

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mg/tensor.hpp"

namespace mg::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One tape node: value plus lazily allocated gradient. The graph is
// define-by-run: each op allocates a fresh node pointing at its parents, so
// the tape is rebuilt every forward pass and freed when the handles die.
struct Node {
    Tensor value;
    Tensor grad;
    bool grad_set = false;    // grad buffer allocated and seeded
    bool needs_grad = false;  // reaches a parameter
    bool is_param = false;
    bool released = false;    // backward already consumed this subgraph
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buf();  // allocates zeros on first touch
};

// Lightweight handle over a tape node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}
    const Tensor& value() const { return n_->value; }
    const Tensor& grad() const;
    const std::vector<int>& shape() const { return n_->value.shape(); }
    NodePtr node() const { return n_; }
    bool defined() const { return static_cast<bool>(n_); }
    void zero_grad();

private:
    NodePtr n_;
};

Var constant(Tensor value);
Var param(Tensor value);  // leaf that accumulates gradient

// Escape hatch for fused ops implemented outside this file (e.g. the graph
// edge convolution). backward_fn sees the finished node and accumulates into
// node.parents[i]->grad_buf().
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var square(const Var& a);
Var scale(const Var& a, double c);
Var relu(const Var& a);
Var sigmoid(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                      // [m,k]x[k,n]
Var linear(const Var& x, const Var& w, const Var& b);        // x[n,d], w[o,d], b[o] -> [n,o]

// ---- convolution / pooling ----
enum class Padding { Same, Valid };
// x [N,C,H,W], k [O,C,kh,kw], b [O]. fuse_relu applies relu in the same node.
Var conv2d(const Var& x, const Var& k, const Var& b, int stride = 1,
           Padding pad = Padding::Same, bool fuse_relu = false);
// [N,C,H,W] -> floor dims; kw/sw = -1 pools a square k/stride window, else the
// window is kh x kw with strides (stride, sw)
Var max_pool2d(const Var& x, int k = 2, int stride = 2, int kw = -1, int sw = -1);
Var global_avg_pool(const Var& x);                           // [N,C,H,W] -> [N,C]

// ---- shaping ----
Var concat(const std::vector<Var>& parts, int axis);
Var gather_rows(const Var& x, std::vector<int> idx);         // [n,d] -> [m,d]
Var replace_row(const Tensor& base, int row, const Var& v);  // base const, row differentiable
Var reshape(const Var& x, std::vector<int> shape);
Var element(const Var& x, std::int64_t flat_index);          // scalar pick

// ---- reductions / losses ----
Var sum(const Var& x);
Var mean(const Var& x);
Var softmax(const Var& x);  // rowwise over last axis of a matrix
// mean over masked rows of -log softmax(logits)[target]; mask empty = all rows
Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                  const std::vector<std::uint8_t>& mask = {});
Var binary_cross_entropy(const Var& p, const std::vector<double>& targets);

// Reverse accumulation from a scalar loss. With retain=false the visited
// subgraph is released and a second backward throws.
void backward(const Var& loss, bool retain = false);

// Central finite differences against the tape gradient; returns the worst
// relative error over all coordinates of x.
double check_gradient(const std::function<Var(const Var&)>& f, const Tensor& x, double eps = 1e-5);

// ---- optimizer ----
struct AdamState {
    std::vector<Tensor> m, v;
    long t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// Bias-corrected Adam on parameter leaves; reads and then clears their grads.
void adam_step(const std::vector<Var>& params, AdamState& state, double lr);

// ---- init helpers ----
Tensor randn(std::vector<int> shape, std::mt19937_64& rng, double stddev);
Tensor he_normal(std::vector<int> shape, std::mt19937_64& rng, int fan_in);

// Named-parameter checkpoint: params.bin blob + manifest.json with
// {name, shape, offset} entries.
struct Checkpoint {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;
    void add(const std::string& name, const Tensor& t);
    const Tensor& get(const std::string& name) const;
};
void save_checkpoint(const Checkpoint& ck, const std::string& dir);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace mg::ad
