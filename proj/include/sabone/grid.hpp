#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sabone/error.hpp"

namespace sabone {

struct Shape3 {
    int64_t depth = 0;
    int64_t height = 0;
    int64_t width = 0;

    int64_t voxels() const { return depth * height * width; }
    bool operator==(const Shape3&) const = default;
};

std::string to_string(const Shape3& s);

/// Dense row-major 3D grid indexed [d, h, w], width fastest.
template <class T>
class Grid3 {
public:
    Grid3() = default;
    explicit Grid3(Shape3 shape, T fill = T{})
        : shape_(shape), data_(static_cast<size_t>(checked_voxels(shape)), fill) {}
    Grid3(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != checked_voxels(shape))
            throw shape_error("grid data size does not match shape " + to_string(shape));
    }

    const Shape3& shape() const { return shape_; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    T& at(int64_t d, int64_t h, int64_t w) { return data_[index(d, h, w)]; }
    const T& at(int64_t d, int64_t h, int64_t w) const { return data_[index(d, h, w)]; }

    size_t index(int64_t d, int64_t h, int64_t w) const {
        return static_cast<size_t>((d * shape_.height + h) * shape_.width + w);
    }

    std::span<T> plane(int64_t d) {
        const auto n = static_cast<size_t>(shape_.height * shape_.width);
        return std::span<T>(data_).subspan(static_cast<size_t>(d) * n, n);
    }
    std::span<const T> plane(int64_t d) const {
        const auto n = static_cast<size_t>(shape_.height * shape_.width);
        return std::span<const T>(data_).subspan(static_cast<size_t>(d) * n, n);
    }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool operator==(const Grid3&) const = default;

private:
    static int64_t checked_voxels(const Shape3& s) {
        if (s.depth < 1 || s.height < 1 || s.width < 1)
            throw shape_error("grid dimensions must be >= 1, got " + to_string(s));
        return s.voxels();
    }

    Shape3 shape_;
    std::vector<T> data_;
};

/// Dense row-major 2D array indexed [h, w].
template <class T>
class Plane {
public:
    Plane() = default;
    Plane(int64_t height, int64_t width, T fill = T{})
        : height_(height), width_(width), data_(static_cast<size_t>(height * width), fill) {
        if (height < 1 || width < 1) throw shape_error("plane dimensions must be >= 1");
    }
    Plane(int64_t height, int64_t width, std::vector<T> data)
        : height_(height), width_(width), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != height * width)
            throw shape_error("plane data size does not match shape");
    }

    int64_t height() const { return height_; }
    int64_t width() const { return width_; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    T& at(int64_t h, int64_t w) { return data_[static_cast<size_t>(h * width_ + w)]; }
    const T& at(int64_t h, int64_t w) const { return data_[static_cast<size_t>(h * width_ + w)]; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool same_shape(const Plane& o) const { return height_ == o.height_ && width_ == o.width_; }
    bool operator==(const Plane&) const = default;

private:
    int64_t height_ = 0;
    int64_t width_ = 0;
    std::vector<T> data_;
};

using FloatPlane = Plane<float>;
using MaskPlane = Plane<uint8_t>;

}  // namespace sabone
