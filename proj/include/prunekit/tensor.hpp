#pragma once

#include <string>
#include <vector>

#include "prunekit/errors.hpp"

namespace prunekit {

// Dense row-major 2-D float tensor, the universal carrier for weights and
// activation batches. Weight matrices are stored (out_features x in_features);
// activation batches are (tokens x channels).
class Tensor2 {
  public:
    Tensor2() = default;
    Tensor2(int rows, int cols);                            // zero-filled
    Tensor2(int rows, int cols, std::vector<float> values); // takes ownership

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }

    float at(int r, int c) const { return data_[size_t(r) * cols_ + c]; }
    float &at(int r, int c) { return data_[size_t(r) * cols_ + c]; }
    const float *row(int r) const { return data_.data() + size_t(r) * cols_; }
    float *row(int r) { return data_.data() + size_t(r) * cols_; }

    const std::vector<float> &data() const { return data_; }
    std::vector<float> &data() { return data_; }

    bool same_shape(const Tensor2 &o) const {
        return rows_ == o.rows_ && cols_ == o.cols_;
    }
    bool all_finite() const;
    std::string shape_str() const;

  private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<float> data_;
};

// Standard matrix product with a fixed accumulation order: for each output
// element the inner sum runs over k ascending, accumulated in double and
// rounded to float once at the end. Throws ShapeError naming both shapes on
// an inner-dimension mismatch.
Tensor2 matmul(const Tensor2 &a, const Tensor2 &b);

// a * transpose(b), bitwise-identical to matmul(a, transpose(b)) but without
// materializing the transpose. Both operands are walked along contiguous
// rows, which is the hot path of the model forward.
Tensor2 matmul_nt(const Tensor2 &a, const Tensor2 &b);

Tensor2 transpose(const Tensor2 &a);

// Row-wise softmax with max subtraction; each output row sums to 1.
Tensor2 rowwise_softmax(const Tensor2 &x);

} // namespace prunekit
