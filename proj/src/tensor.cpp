#include "stpredict/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>
#include <utility>

namespace stpredict {

std::string format_dims(const std::vector<std::size_t>& dims) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << "x";
        os << dims[i];
    }
    os << "]";
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(std::vector<std::size_t> dims, bool requires_grad) {
    if (dims.empty() || dims.size() > 5) {
        throw ShapeError("tensor rank must be 1..5, got " + format_dims(dims));
    }
    std::size_t n = 1;
    for (std::size_t d : dims) {
        if (d == 0) throw ShapeError("zero extent in " + format_dims(dims));
        n *= d;
    }
    impl_ = std::make_shared<detail::TensorImpl<T>>();
    impl_->dims = std::move(dims);
    impl_->data.assign(n, T(0));
    impl_->requires_grad = requires_grad;
    if (requires_grad) impl_->grad.assign(n, T(0));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<std::size_t> dims) {
    return Tensor(std::move(dims));
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<std::size_t> dims, T value) {
    Tensor t(std::move(dims));
    t.impl_->data.assign(t.numel(), value);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
    return full({1}, value);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(std::vector<std::size_t> dims, std::vector<T> data) {
    Tensor t(std::move(dims));
    if (data.size() != t.numel()) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match " + format_dims(t.dims()));
    }
    t.impl_->data = std::move(data);
    return t;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on non-scalar tensor " + format_dims(dims()));
    }
    return impl_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
    Tensor t(impl_->dims);
    t.impl_->data = impl_->data;
    return t;
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward expects a scalar loss, got " +
                         (loss.defined() ? format_dims(loss.dims())
                                         : std::string("<undefined>")));
    }
    std::unordered_set<const void*> outputs;
    outputs.reserve(nodes_.size());
    for (auto& node : nodes_) {
        node.output.zero_grad();
        outputs.insert(node.output.impl());
    }
    // Leaves: tracked inputs that no node produced. Their running grads are
    // parked so this pass accumulates from zero.
    std::unordered_map<const void*, std::pair<Tensor<T>, std::vector<T>>> parked;
    for (auto& node : nodes_) {
        for (auto& in : node.inputs) {
            if (!in.defined() || !in.tracked()) continue;
            if (outputs.count(in.impl()) || parked.count(in.impl())) continue;
            in.ensure_grad();
            std::vector<T> stash(in.numel());
            std::swap_ranges(stash.begin(), stash.end(), in.grad());
            parked.emplace(in.impl(), std::make_pair(in, std::move(stash)));
        }
    }

    Tensor<T> seed = loss;
    seed.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        // Dead branches never receive an upstream gradient; skip them.
        if (!it->output.has_grad()) continue;
        it->backfn();
    }

    for (auto& [key, entry] : parked) {
        auto& [tensor, stash] = entry;
        T* grad = tensor.grad();
        for (std::size_t i = 0; i < stash.size(); ++i) grad[i] += stash[i];
    }
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace stpredict
