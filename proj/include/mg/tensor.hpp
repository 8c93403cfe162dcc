#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace mg {

// Dense row-major double tensor. The single numeric container used by every
// module (audio matrices, autodiff values/grads, checkpoints).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    int dim(int i) const { return shape_.at(i); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[i]; }
    double operator[](std::int64_t i) const { return data_[i]; }

    // 2-d / 3-d / 4-d accessors (row-major)
    double& at(int i, int j) { return data_[static_cast<std::int64_t>(i) * shape_[1] + j]; }
    double at(int i, int j) const { return data_[static_cast<std::int64_t>(i) * shape_[1] + j]; }
    double& at(int i, int j, int k) {
        return data_[(static_cast<std::int64_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    double at(int i, int j, int k) const {
        return data_[(static_cast<std::int64_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    double& at(int i, int j, int k, int l) {
        return data_[((static_cast<std::int64_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double at(int i, int j, int k, int l) const {
        return data_[((static_cast<std::int64_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    Tensor reshaped(std::vector<int> new_shape) const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    double min() const;
    double max() const;
    double sum() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Flat binary tensor file: magic "MGTF", u32 version, u32 dtype (1 = f64),
// u32 rank, u32 dims[rank], then little-endian f64 payload.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

// Grayscale PGM (P5), values min-max scaled to 0..255. rows x cols matrix.
void save_pgm(const Tensor& matrix, const std::string& path);
// Color PPM (P6) from an RGB triple per pixel, values expected in [0,1].
void save_ppm(const Tensor& rgb, const std::string& path);

}  // namespace mg
