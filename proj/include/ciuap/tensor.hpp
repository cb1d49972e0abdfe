#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ciuap {

// NCHW shape. Flat feature vectors use (n, features, 1, 1).
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::size_t size() const { return static_cast<std::size_t>(n) * c * h * w; }
    std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
    Shape with_batch(int batch) const { return {batch, c, h, w}; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0F);
    Tensor(Shape shape, std::vector<float> data);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> span() { return data_; }
    std::span<const float> span() const { return data_; }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }
    float& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    float at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

    std::span<float> sample(int n);
    std::span<const float> sample(int n) const;

    // Copy of samples [begin, begin + count).
    Tensor slice(int begin, int count) const;
    // Copy of the listed samples, in order.
    Tensor gather(std::span<const int> indices) const;
    // Same data viewed under a new shape of equal size.
    Tensor reshaped(Shape shape) const;

    void fill(float v);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(float s);

    float abs_max() const;
    bool all_finite() const;

    bool operator==(const Tensor& other) const = default;

private:
    std::size_t index(int n, int c, int h, int w) const
    {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    Shape shape_;
    std::vector<float> data_;
};

// Concatenates along the batch axis. All parts must share (c, h, w).
Tensor concat_batch(std::span<const Tensor> parts);

} // namespace ciuap
