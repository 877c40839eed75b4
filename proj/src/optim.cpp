#include "nfkit/optim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace nfkit::ad {

void adamw_step(ParamStore& params, OptimizerState& state) {
    state.step_count += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));

    for (auto& [name, p] : params.all()) {
        auto n = static_cast<std::size_t>(p.size());
        auto& m = state.first_moment[name];
        auto& v = state.second_moment[name];
        if (m.size() != n) m.assign(n, 0.0);
        if (v.size() != n) v.assign(n, 0.0);

        static const std::vector<double> kNoGrad;
        const std::vector<double>& g = p.has_grad() ? p.grad() : kNoGrad;
        if (!g.empty()) {
            for (double gi : g)
                if (!std::isfinite(gi))
                    throw numeric_error("adamw_step: non-finite gradient in '" + name + "' at step " +
                                        std::to_string(state.step_count));
        }

        auto& w = p.mutable_values();
        for (std::size_t i = 0; i < n; ++i) {
            double gi = g.empty() ? 0.0 : g[i];
            // Decoupled decay, then bias-corrected moment update.
            w[i] -= state.learning_rate * state.weight_decay * w[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            w[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.eps);
            if (!std::isfinite(w[i]))
                throw numeric_error("adamw_step: non-finite parameter in '" + name + "' after step " +
                                    std::to_string(state.step_count));
        }
    }
}

namespace {

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw format_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    auto n = read_u64(is);
    if (n > (1u << 20)) throw format_error("checkpoint: implausible string length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw format_error("checkpoint: truncated string");
    return s;
}

void write_f64_array(std::ostream& os, const std::vector<double>& v) {
    write_u64(os, v.size());
    for (double x : v) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        write_u64(os, bits);
    }
}

std::vector<double> read_f64_array(std::istream& is) {
    auto n = read_u64(is);
    std::vector<double> v(n);
    for (auto& x : v) {
        std::uint64_t bits = read_u64(is);
        std::memcpy(&x, &bits, 8);
    }
    return v;
}

void write_tensor_entry(std::ostream& os, const std::string& name, const std::vector<std::int64_t>& shape,
                        const std::vector<double>& data) {
    write_string(os, name);
    write_u64(os, shape.size());
    for (auto d : shape) write_u64(os, static_cast<std::uint64_t>(d));
    write_f64_array(os, data);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params, const OptimizerState& state,
                     const std::map<std::string, std::string>& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("checkpoint: cannot open for write: " + path);
    os << kCheckpointHeader << '\n';

    auto all_meta = meta;
    all_meta["opt.learning_rate"] = std::to_string(state.learning_rate);
    all_meta["opt.weight_decay"] = std::to_string(state.weight_decay);
    write_u64(os, all_meta.size());
    for (const auto& [k, v] : all_meta) {
        write_string(os, k);
        write_string(os, v);
    }
    write_u64(os, static_cast<std::uint64_t>(state.step_count));

    std::uint64_t n_tensors = params.all().size();
    n_tensors += state.first_moment.size() + state.second_moment.size();
    write_u64(os, n_tensors);
    for (const auto& [name, p] : params.all()) write_tensor_entry(os, "param/" + name, p.shape(), p.values());
    for (const auto& [name, m] : state.first_moment)
        write_tensor_entry(os, "adam_m/" + name, {static_cast<std::int64_t>(m.size())}, m);
    for (const auto& [name, v] : state.second_moment)
        write_tensor_entry(os, "adam_v/" + name, {static_cast<std::int64_t>(v.size())}, v);
    if (!os) throw format_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("checkpoint: cannot open: " + path);
    std::string header;
    std::getline(is, header);
    if (header != kCheckpointHeader) throw format_error("checkpoint: bad header '" + header + "'");

    Checkpoint ckpt;
    auto n_meta = read_u64(is);
    for (std::uint64_t i = 0; i < n_meta; ++i) {
        auto k = read_string(is);
        auto v = read_string(is);
        ckpt.meta[k] = v;
    }
    ckpt.step_count = static_cast<std::int64_t>(read_u64(is));
    auto n_tensors = read_u64(is);
    for (std::uint64_t i = 0; i < n_tensors; ++i) {
        auto name = read_string(is);
        auto ndim = read_u64(is);
        std::vector<std::int64_t> shape(ndim);
        for (auto& d : shape) d = static_cast<std::int64_t>(read_u64(is));
        auto data = read_f64_array(is);
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw format_error("checkpoint: shape/data mismatch for " + name);
        ckpt.tensors[name] = {std::move(shape), std::move(data)};
    }
    return ckpt;
}

void restore(const Checkpoint& ckpt, ParamStore& params, OptimizerState& state) {
    for (auto& [name, p] : params.all()) {
        auto it = ckpt.tensors.find("param/" + name);
        if (it == ckpt.tensors.end()) throw format_error("checkpoint: missing parameter " + name);
        if (it->second.first != p.shape())
            throw shape_error("checkpoint: shape mismatch for " + name + ": " + shape_str(it->second.first) +
                              " vs " + shape_str(p.shape()));
        p.mutable_values() = it->second.second;
    }
    state.step_count = ckpt.step_count;
    state.first_moment.clear();
    state.second_moment.clear();
    for (const auto& [name, entry] : ckpt.tensors) {
        if (name.rfind("adam_m/", 0) == 0) state.first_moment[name.substr(7)] = entry.second;
        if (name.rfind("adam_v/", 0) == 0) state.second_moment[name.substr(7)] = entry.second;
    }
    if (auto it = ckpt.meta.find("opt.learning_rate"); it != ckpt.meta.end())
        state.learning_rate = std::stod(it->second);
    if (auto it = ckpt.meta.find("opt.weight_decay"); it != ckpt.meta.end())
        state.weight_decay = std::stod(it->second);
}

}  // namespace nfkit::ad
