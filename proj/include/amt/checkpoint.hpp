#pragma once

#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "amt/common.hpp"
#include "amt/tensor.hpp"

namespace amt {

/// On-disk model container, version tag "AMT1": a JSON manifest
/// (name, shape, dtype, byte offset per tensor) followed by raw
/// little-endian scalar data.
class Checkpoint {
public:
    struct Record {
        std::string name;
        Shape shape;
        std::string dtype;  // "f32" | "f64"
        std::vector<unsigned char> bytes;
    };

    nlohmann::json meta;  // model/config echo, free-form

    template <class S>
    void put(const std::string& name, const Tensor<S>& t) {
        Record r;
        r.name = name;
        r.shape = t.shape();
        r.dtype = sizeof(S) == 4 ? "f32" : "f64";
        r.bytes.resize(t.data().size() * sizeof(S));
        std::memcpy(r.bytes.data(), t.data().data(), r.bytes.size());
        records_.push_back(std::move(r));
    }

    bool has(const std::string& name) const { return find(name) != nullptr; }

    /// Read a tensor back, casting between f32/f64 when needed.
    template <class S>
    Tensor<S> get(const std::string& name) const {
        const Record* r = find(name);
        require(r != nullptr, "checkpoint: no tensor named '" + name + "'");
        std::vector<S> data(static_cast<size_t>(numel(r->shape)));
        if (r->dtype == "f32") {
            std::vector<float> tmp(data.size());
            std::memcpy(tmp.data(), r->bytes.data(), r->bytes.size());
            for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<S>(tmp[i]);
        } else {
            std::vector<double> tmp(data.size());
            std::memcpy(tmp.data(), r->bytes.data(), r->bytes.size());
            for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<S>(tmp[i]);
        }
        return Tensor<S>::from(r->shape, std::move(data));
    }

    const std::vector<Record>& records() const { return records_; }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

private:
    const Record* find(const std::string& name) const {
        for (const auto& r : records_)
            if (r.name == name) return &r;
        return nullptr;
    }

    std::vector<Record> records_;
};

}  // namespace amt
