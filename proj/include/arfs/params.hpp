#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace arfs {

// Flat named-tensor layout shared by the parameters, gradients, Adam moments
// and the EMA shadow; the checkpoint writer walks the same table.
struct TensorSpec {
    std::string name;
    size_t offset = 0;
    size_t size = 0;
    std::vector<uint32_t> dims;
    bool decay = false;  // participates in weight decay
};

struct ParamLayout {
    std::vector<TensorSpec> tensors;
    size_t total = 0;

    size_t add(const std::string& name, std::vector<uint32_t> dims, bool decay) {
        size_t sz = 1;
        for (uint32_t d : dims) sz *= d;
        const size_t off = total;
        tensors.push_back(TensorSpec{name, off, sz, std::move(dims), decay});
        total += sz;
        return off;
    }

    const TensorSpec& find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return t;
        }
        throw std::invalid_argument("unknown tensor: " + name);
    }

    bool has(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return true;
        }
        return false;
    }
};

}  // namespace arfs
