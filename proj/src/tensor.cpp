#include "mg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace mg {

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
        throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape));
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::min() const {
    return *std::min_element(data_.begin(), data_.end());
}

double Tensor::max() const {
    return *std::max_element(data_.begin(), data_.end());
}

double Tensor::sum() const {
    return std::accumulate(data_.begin(), data_.end(), 0.0);
}

namespace {

constexpr char kMagic[4] = {'M', 'G', 'T', 'F'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeF64 = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open tensor file for write: " + path);
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, kDtypeF64);
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
    // host is little-endian x86; payload written as-is
    os.write(reinterpret_cast<const char*>(t.data()), t.numel() * static_cast<std::int64_t>(sizeof(double)));
    if (!os) throw std::runtime_error("short write on tensor file: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open tensor file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad tensor file magic: " + path);
    std::uint32_t version = read_u32(is);
    std::uint32_t dtype = read_u32(is);
    if (version != kVersion || dtype != kDtypeF64)
        throw std::runtime_error("unsupported tensor file version/dtype: " + path);
    std::uint32_t rank = read_u32(is);
    if (rank > 8) throw std::runtime_error("tensor rank too large: " + path);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_u32(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()), t.numel() * static_cast<std::int64_t>(sizeof(double)));
    if (!is) throw std::runtime_error("short read on tensor file: " + path);
    return t;
}

void save_pgm(const Tensor& matrix, const std::string& path) {
    if (matrix.rank() != 2) throw std::invalid_argument("save_pgm expects a matrix, got " + shape_str(matrix.shape()));
    const int rows = matrix.dim(0), cols = matrix.dim(1);
    double lo = matrix.min(), hi = matrix.max();
    double range = hi - lo;
    if (range <= 0) range = 1.0;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open PGM for write: " + path);
    os << "P5\n" << cols << " " << rows << "\n255\n";
    std::vector<unsigned char> row(cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double v = (matrix.at(r, c) - lo) / range;
            row[c] = static_cast<unsigned char>(std::lround(v * 255.0));
        }
        os.write(reinterpret_cast<const char*>(row.data()), cols);
    }
}

void save_ppm(const Tensor& rgb, const std::string& path) {
    if (rgb.rank() != 3 || rgb.dim(2) != 3)
        throw std::invalid_argument("save_ppm expects [rows,cols,3], got " + shape_str(rgb.shape()));
    const int rows = rgb.dim(0), cols = rgb.dim(1);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open PPM for write: " + path);
    os << "P6\n" << cols << " " << rows << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(cols) * 3);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c)
            for (int k = 0; k < 3; ++k) {
                double v = std::clamp(rgb.at(r, c, k), 0.0, 1.0);
                row[static_cast<size_t>(c) * 3 + k] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

}  // namespace mg
