#include "ciuap/tensor.hpp"

#include "ciuap/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ciuap {

std::string Shape::str() const
{
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape), data_(shape.size(), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data))
{
    require(data_.size() == shape_.size(), "tensor data size does not match shape " + shape_.str());
}

std::span<float> Tensor::sample(int n)
{
    const auto stride = shape_.sample_size();
    return {data_.data() + n * stride, stride};
}

std::span<const float> Tensor::sample(int n) const
{
    const auto stride = shape_.sample_size();
    return {data_.data() + n * stride, stride};
}

Tensor Tensor::slice(int begin, int count) const
{
    require(begin >= 0 && count >= 0 && begin + count <= shape_.n, "slice out of range");
    const auto stride = shape_.sample_size();
    Tensor out(shape_.with_batch(count));
    std::copy_n(data_.begin() + begin * stride, count * stride, out.data_.begin());
    return out;
}

Tensor Tensor::gather(std::span<const int> indices) const
{
    const auto stride = shape_.sample_size();
    Tensor out(shape_.with_batch(static_cast<int>(indices.size())));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] >= 0 && indices[i] < shape_.n, "gather index out of range");
        std::copy_n(data_.begin() + indices[i] * stride, stride, out.data_.begin() + i * stride);
    }
    return out;
}

Tensor Tensor::reshaped(Shape shape) const
{
    require(shape.size() == data_.size(), "cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(shape, data_);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other)
{
    require(other.shape_ == shape_, "tensor add shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(float s)
{
    for (auto& v : data_) v *= s;
    return *this;
}

float Tensor::abs_max() const
{
    float m = 0.0F;
    for (float v : data_) m = std::max(m, std::fabs(v));
    return m;
}

bool Tensor::all_finite() const
{
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor concat_batch(std::span<const Tensor> parts)
{
    require(!parts.empty(), "concat of zero tensors");
    Shape s = parts.front().shape();
    int total = 0;
    for (const auto& p : parts) {
        require(p.shape().with_batch(0) == s.with_batch(0), "concat sample shape mismatch");
        total += p.shape().n;
    }
    Tensor out(s.with_batch(total));
    auto it = out.vec().begin();
    for (const auto& p : parts) it = std::copy(p.vec().begin(), p.vec().end(), it);
    return out;
}

} // namespace ciuap
