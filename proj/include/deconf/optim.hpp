#pragma once

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deconf/errors.hpp"
#include "deconf/tensor.hpp"

namespace deconf {

/// Named trainable tensors with per-parameter learning-rate multipliers.
/// Entries keep insertion order; tensors are shared handles, so layers that
/// hold the same Tensor see updates.
class ParameterSet {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        double multiplier = 1.0;
    };

    const Tensor& add(const std::string& name, Tensor t, double multiplier = 1.0) {
        if (index_.count(name)) throw DataError("duplicate parameter name '" + name + "'");
        if (!(multiplier > 0.0)) throw DataError("learning-rate multiplier of '" + name + "' must be positive");
        t.set_requires_grad(true);
        index_[name] = entries_.size();
        entries_.push_back(Entry{name, std::move(t), multiplier});
        return entries_.back().tensor;
    }

    void add(const std::string& prefix, const Linear& l, double multiplier = 1.0) {
        add(prefix + ".weight", l.weight, multiplier);
        add(prefix + ".bias", l.bias, multiplier);
    }

    void add(const std::string& prefix, const LstmCell& c, double multiplier = 1.0) {
        add(prefix + ".weight", c.weight, multiplier);
        add(prefix + ".bias", c.bias, multiplier);
    }

    void add(const std::string& prefix, const GluCell& g, double multiplier = 1.0) {
        add(prefix + ".value", g.value, multiplier);
        add(prefix + ".gate", g.gate, multiplier);
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("unknown parameter '" + name + "'");
        return entries_[it->second].tensor;
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.size();
        return n;
    }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (const auto& e : entries_) out.push_back(e.tensor);
        return out;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    /// Copies of every parameter value, in entry order.
    std::vector<std::vector<double>> snapshot() const {
        std::vector<std::vector<double>> out;
        for (const auto& e : entries_) out.push_back(e.tensor.values());
        return out;
    }

    void restore(const std::vector<std::vector<double>>& values) {
        if (values.size() != entries_.size()) throw DataError("snapshot does not match parameter set");
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (values[i].size() != entries_[i].tensor.size()) throw DataError("snapshot shape mismatch");
            entries_[i].tensor.values() = values[i];
        }
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double base_lr = 5e-4;
    double decay = 0.8;
    std::size_t decay_every = 5;
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    /// base_lr * decay^(epoch / decay_every), integer division.
    double lr_at(std::size_t epoch) const {
        return base_lr * std::pow(decay, static_cast<double>(decay_every ? epoch / decay_every : 0));
    }
};

/// One Adam update. Missing gradients count as zero. The applied step for a
/// parameter is lr_at(epoch) * multiplier * m_hat / (sqrt(v_hat) + eps).
inline void adam_step(ParameterSet& params, AdamState& st, std::size_t epoch) {
    auto& entries = params.entries();
    if (st.m.size() != entries.size()) {
        st.m.assign(entries.size(), {});
        st.v.assign(entries.size(), {});
        for (std::size_t i = 0; i < entries.size(); ++i) {
            st.m[i].assign(entries[i].tensor.size(), 0.0);
            st.v[i].assign(entries[i].tensor.size(), 0.0);
        }
    }
    ++st.step;
    const double lr = st.lr_at(epoch);
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Tensor& t = entries[i].tensor;
        const auto& g = t.grad();
        auto& w = t.values();
        auto& m = st.m[i];
        auto& v = st.v[i];
        if (m.size() != w.size()) throw ShapeError("Adam moments do not match parameter '" + entries[i].name + "'");
        const double rate = lr * entries[i].multiplier;
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g.empty() ? 0.0 : g[k];
            m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * gk;
            v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * gk * gk;
            const double mh = m[k] / bc1;
            const double vh = v[k] / bc2;
            w[k] -= rate * mh / (std::sqrt(vh) + st.eps);
        }
    }
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t tensor = 0;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates = 0;
    double max_abs_error = 0.0;
    // Relative error over coordinates with |analytic| + |numeric| >= resolvable.
    double max_rel_error_resolved = 0.0;
    std::size_t unresolved = 0;
};

/// Below this gradient magnitude, central differences at eps = 1e-5 are dominated by roundoff.
inline constexpr double kGradResolvable = 1e-4;

/**
 * Compares reverse-mode gradients of a scalar function with central
 * differences. The error of one coordinate is
 * |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
 */
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps = 1e-5) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    {
        const Tensor loss = f();
        backward(loss);
    }
    GradCheckResult r;
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& w = params[t].values();
        const std::vector<double> analytic = params[t].grad();
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double saved = w[k];
            double fp = 0.0, fm = 0.0;
            {
                NoGradGuard ng;
                w[k] = saved + eps;
                fp = f().item();
                w[k] = saved - eps;
                fm = f().item();
            }
            w[k] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[k];
            const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            ++r.coordinates;
            r.max_abs_error = std::max(r.max_abs_error, std::abs(a - numeric));
            if (std::abs(a) + std::abs(numeric) >= kGradResolvable) {
                r.max_rel_error_resolved = std::max(r.max_rel_error_resolved, err);
            } else {
                ++r.unresolved;
            }
            if (err > r.max_rel_error || r.coordinates == 1) {
                r.max_rel_error = err;
                r.tensor = t;
                r.index = k;
                r.analytic = a;
                r.numeric = numeric;
            }
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.json manifest plus <stem>.bin of little-endian doubles.

namespace detail {

inline void write_le_doubles(std::ofstream& out, const std::vector<double>& v) {
    for (double d : v) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        unsigned char buf[8];
        std::memcpy(buf, &bits, 8);
        out.write(reinterpret_cast<const char*>(buf), 8);
    }
}

inline std::vector<double> read_le_doubles(const std::vector<unsigned char>& blob, std::size_t offset, std::size_t count) {
    if ((offset + count) * 8 > blob.size()) throw DataError("checkpoint blob is truncated");
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, blob.data() + (offset + i) * 8, 8);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("cannot parse '" + path + "': " + e.what());
    }
}

}  // namespace detail

/// Writes stem.json and stem.bin. Adam moments are stored when `adam` is given.
inline void save_checkpoint(const std::string& stem, const ParameterSet& params, const AdamState* adam = nullptr) {
    const std::filesystem::path bin = stem + ".bin";
    std::ofstream out(bin, std::ios::binary);
    if (!out) throw DataError("cannot write '" + bin.string() + "'");
    nlohmann::json j;
    j["format"] = "deconf-checkpoint";
    j["version"] = 1;
    j["blob"] = bin.filename().string();
    j["parameters"] = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& e : params.entries()) {
        j["parameters"].push_back({{"name", e.name},
                                   {"shape", e.tensor.shape()},
                                   {"multiplier", e.multiplier},
                                   {"offset", offset},
                                   {"count", e.tensor.size()}});
        detail::write_le_doubles(out, e.tensor.values());
        offset += e.tensor.size();
    }
    if (adam) {
        nlohmann::json a{{"beta1", adam->beta1}, {"beta2", adam->beta2}, {"eps", adam->eps},
                         {"base_lr", adam->base_lr}, {"decay", adam->decay}, {"decay_every", adam->decay_every},
                         {"step", adam->step}, {"moments", !adam->m.empty()}};
        if (!adam->m.empty()) {
            a["moments_offset"] = offset;
            for (const auto& m : adam->m) detail::write_le_doubles(out, m);
            for (const auto& v : adam->v) detail::write_le_doubles(out, v);
        }
        j["adam"] = a;
    }
    out.close();
    std::ofstream man(stem + ".json");
    if (!man) throw DataError("cannot write '" + stem + ".json'");
    man << j.dump(2) << '\n';
}

/// Loads values into an existing parameter set; names and shapes must match.
inline void load_checkpoint(const std::string& stem, ParameterSet& params, AdamState* adam = nullptr) {
    const auto j = detail::read_json_file(stem + ".json");
    if (j.value("format", "") != "deconf-checkpoint") throw DataError("'" + stem + ".json' is not a checkpoint");
    const auto dir = std::filesystem::path(stem + ".json").parent_path();
    const auto blob = detail::read_file_bytes((dir / j.at("blob").get<std::string>()).string());
    const auto& ps = j.at("parameters");
    if (ps.size() != params.size()) throw DataError("checkpoint has " + std::to_string(ps.size()) + " parameters, model has " + std::to_string(params.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& e = params.entries()[i];
        if (ps[i].at("name").get<std::string>() != e.name) throw DataError("checkpoint parameter order differs at '" + e.name + "'");
        if (ps[i].at("shape").get<Shape>() != e.tensor.shape()) throw DataError("checkpoint shape mismatch for '" + e.name + "'");
        e.tensor.values() = detail::read_le_doubles(blob, ps[i].at("offset").get<std::size_t>(), e.tensor.size());
        e.multiplier = ps[i].at("multiplier").get<double>();
    }
    if (adam && j.contains("adam")) {
        const auto& a = j["adam"];
        adam->beta1 = a.at("beta1").get<double>();
        adam->beta2 = a.at("beta2").get<double>();
        adam->eps = a.at("eps").get<double>();
        adam->base_lr = a.at("base_lr").get<double>();
        adam->decay = a.at("decay").get<double>();
        adam->decay_every = a.at("decay_every").get<std::size_t>();
        adam->step = a.at("step").get<std::size_t>();
        adam->m.clear();
        adam->v.clear();
        if (a.at("moments").get<bool>()) {
            std::size_t off = a.at("moments_offset").get<std::size_t>();
            for (const auto& e : params.entries()) {
                adam->m.push_back(detail::read_le_doubles(blob, off, e.tensor.size()));
                off += e.tensor.size();
            }
            for (const auto& e : params.entries()) {
                adam->v.push_back(detail::read_le_doubles(blob, off, e.tensor.size()));
                off += e.tensor.size();
            }
        }
    }
}

}  // namespace deconf
