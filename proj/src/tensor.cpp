#include "prunekit/tensor.hpp"

#include <cmath>

namespace prunekit {

Tensor2::Tensor2(int rows, int cols)
    : rows_(rows), cols_(cols), data_(size_t(rows) * size_t(cols), 0.0f) {
    if (rows < 0 || cols < 0) {
        throw ShapeError("negative tensor dimensions " + shape_str());
    }
}

Tensor2::Tensor2(int rows, int cols, std::vector<float> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (rows < 0 || cols < 0 || data_.size() != size_t(rows) * size_t(cols)) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str());
    }
}

bool Tensor2::all_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor2::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Tensor2 matmul(const Tensor2 &a, const Tensor2 &b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul dimension mismatch: " + a.shape_str() + " * " +
                         b.shape_str());
    }
    Tensor2 out(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        const float *arow = a.row(i);
        float *orow = out.row(i);
        for (int j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols(); ++k) {
                acc += double(arow[k]) * double(b.at(k, j));
            }
            orow[j] = float(acc);
        }
    }
    return out;
}

Tensor2 matmul_nt(const Tensor2 &a, const Tensor2 &b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt dimension mismatch: " + a.shape_str() +
                         " * (" + b.shape_str() + ")^T");
    }
    Tensor2 out(a.rows(), b.rows());
    for (int i = 0; i < a.rows(); ++i) {
        const float *arow = a.row(i);
        float *orow = out.row(i);
        for (int j = 0; j < b.rows(); ++j) {
            const float *brow = b.row(j);
            double acc = 0.0;
            for (int k = 0; k < a.cols(); ++k) {
                acc += double(arow[k]) * double(brow[k]);
            }
            orow[j] = float(acc);
        }
    }
    return out;
}

Tensor2 transpose(const Tensor2 &a) {
    Tensor2 out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) {
            out.at(j, i) = a.at(i, j);
        }
    }
    return out;
}

Tensor2 rowwise_softmax(const Tensor2 &x) {
    Tensor2 out(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
        const float *in = x.row(i);
        float *o = out.row(i);
        float mx = in[0];
        for (int j = 1; j < x.cols(); ++j) {
            if (in[j] > mx) mx = in[j];
        }
        double sum = 0.0;
        for (int j = 0; j < x.cols(); ++j) {
            double e = std::exp(double(in[j]) - double(mx));
            o[j] = float(e);
            sum += e;
        }
        for (int j = 0; j < x.cols(); ++j) {
            o[j] = float(double(o[j]) / sum);
        }
    }
    return out;
}

} // namespace prunekit
