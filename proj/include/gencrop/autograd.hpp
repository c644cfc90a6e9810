#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace gencrop::ag {

using Matrix = Eigen::MatrixXd;

// Feature maps are stored channels-by-pixels: (C, H*W), pixel index = y*W + x.

class Tape;

// Handle into a tape; cheap to copy.
struct Value {
    Tape* tape = nullptr;
    int idx = -1;

    const Matrix& val() const;
    int rows() const { return static_cast<int>(val().rows()); }
    int cols() const { return static_cast<int>(val().cols()); }
    double scalar() const { return val()(0, 0); }
};

struct Node {
    Matrix val;
    Matrix grad;  // allocated on first contribution
    bool requires_grad = false;
    std::string param_name;  // nonempty for parameter leaves
    std::function<void(Tape&, Node&)> backprop;

    void add_grad(const Matrix& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

// Reverse-mode tape over dense Eigen matrices.
class Tape {
  public:
    Value constant(Matrix m);
    Value input(Matrix m, bool requires_grad = false);
    Value param(const std::string& name, const Matrix& value);
    Value scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

    Node& node(int i) { return nodes_[i]; }
    const Node& node(int i) const { return nodes_[i]; }
    int size() const { return static_cast<int>(nodes_.size()); }

    // Seeds d(loss)/d(loss) = 1 and propagates; loss must be 1x1.
    void backward(Value loss);

    // Adds each parameter leaf's gradient into the sink (keyed by name).
    void accumulate_param_grads(std::map<std::string, Matrix>& sink) const;

    Value emplace(Matrix val, bool requires_grad, std::function<void(Tape&, Node&)> backprop);

  private:
    std::vector<Node> nodes_;
};

// --- elementwise / arithmetic ---
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value cmul(Value a, Value b);            // elementwise
Value scale(Value a, double s);
Value add_scalar(Value a, double s);
Value relu(Value a);
Value sigmoid(Value a);
Value tanh_op(Value a);
Value log_op(Value a, double eps = 0.0);
Value abs_op(Value a);
Value mul_scalarval(Value a, Value s);   // s is 1x1, broadcast multiply

// --- reductions ---
Value sum(Value a);
Value mean(Value a);

// --- linear algebra ---
// matmul with optional transposes: op(a) * op(b)
Value matmul(Value a, Value b, bool trans_a = false, bool trans_b = false);
Value add_bias_cols(Value a, Value bias);  // bias (r x 1) added to every column

// --- structure ---
Value concat_rows(const std::vector<Value>& parts);
Value concat_cols(const std::vector<Value>& parts);
Value slice_rows(Value a, int start, int count);
Value slice_cols(Value a, int start, int count);
Value reshape(Value a, int rows, int cols);  // column-major reinterpret

// --- nonlinearities over structure ---
Value softmax_cols(Value a);  // softmax over each column independently
// Masked softmax over a flattened (n x 1) vector; masked-out entries get
// exactly zero weight and zero gradient.
Value masked_softmax(Value logits, const std::vector<char>& keep);
Value layernorm_cols(Value a, double eps = 1e-5);  // per-column standardization
Value dropout(Value a, double p, std::uint64_t seed, bool training);

// Clamp with pass-through gradient inside the range.
Value clamp(Value a, double lo, double hi);

// --- spatial ops on (C, H*W) maps ---
// Patch extraction for 3x3-style convs; output (C*k*k, outH*outW).
Value im2col(Value a, int height, int width, int ksize, int stride, int pad);
// Nearest-neighbor 2x upsample: (C, H*W) -> (C, 4*H*W).
Value upsample2x(Value a, int height, int width);

// Generic sparse column gather: out(:, j) = sum_k w[j][k] * a(:, col[j][k]).
// Covers bilinear resampling and RoI-style pooling with detached coordinates.
struct ColTap {
    int src = 0;
    double w = 0.0;
};
Value lincomb_cols(Value a, const std::vector<std::vector<ColTap>>& taps);

}  // namespace gencrop::ag
