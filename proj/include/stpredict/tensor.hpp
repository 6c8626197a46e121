#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stpredict/errors.hpp"

namespace stpredict {

std::string format_dims(const std::vector<std::size_t>& dims);

namespace detail {

template <typename T>
struct TensorImpl {
    std::vector<std::size_t> dims;
    std::vector<T> data;
    std::vector<T> grad;        // sized lazily, kept in sync with data
    bool requires_grad = false;
    bool tracked = false;       // set when produced by a recorded op
};

}  // namespace detail

// Dense row-major tensor, up to 5 axes, value-semantic handle over shared
// storage. Mutating data through one handle is visible through copies; the
// training code relies on that for parameter registries.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> dims, bool requires_grad = false);

    static Tensor zeros(std::vector<std::size_t> dims);
    static Tensor full(std::vector<std::size_t> dims, T value);
    static Tensor scalar(T value);
    static Tensor from_data(std::vector<std::size_t> dims, std::vector<T> data);

    bool defined() const { return impl_ != nullptr; }

    const std::vector<std::size_t>& dims() const { return impl_->dims; }
    std::size_t ndim() const { return impl_->dims.size(); }
    std::size_t dim(std::size_t i) const { return impl_->dims[i]; }
    std::size_t numel() const { return impl_->data.size(); }

    T* data() { return impl_->data.data(); }
    const T* data() const { return impl_->data.data(); }
    std::vector<T>& vec() { return impl_->data; }
    const std::vector<T>& vec() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) {
        impl_->requires_grad = b;
        if (b) ensure_grad();
    }

    // True when gradients must flow through this tensor during backward.
    bool tracked() const { return impl_->tracked || impl_->requires_grad; }
    void mark_tracked() { impl_->tracked = true; }

    bool has_grad() const { return !impl_->grad.empty(); }
    T* grad() {
        ensure_grad();
        return impl_->grad.data();
    }
    const std::vector<T>& grad_vec() const { return impl_->grad; }
    void ensure_grad() {
        if (impl_->grad.size() != impl_->data.size()) {
            impl_->grad.assign(impl_->data.size(), T(0));
        }
    }
    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->grad.size(), T(0));
    }

    // Scalar access; shape-checked.
    T item() const;

    // Copy of values with no graph history and no gradient.
    Tensor detached() const;

    // Same storage object?
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    detail::TensorImpl<T>* impl() const { return impl_.get(); }

  private:
    std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Define-by-run tape. Ops append nodes during forward; backward replays the
// closures in reverse. Each pass computes into clean buffers and adds its
// total to leaf gradients in one shot, so leaf grads accumulate across calls
// and a repeated pass doubles them exactly.
template <typename T>
class Graph {
  public:
    void record(Tensor<T> output, std::vector<Tensor<T>> inputs,
                std::function<void()> backfn) {
        output.mark_tracked();
        nodes_.push_back(Node{std::move(output), std::move(inputs), std::move(backfn)});
    }

    void backward(const Tensor<T>& loss);

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor<T> output;
        std::vector<Tensor<T>> inputs;
        std::function<void()> backfn;
    };
    std::vector<Node> nodes_;
};

}  // namespace stpredict
