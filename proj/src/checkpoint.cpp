#include "cfrpn/checkpoint.hpp"

#include <array>
#include <fstream>

#include "byteio.hpp"

namespace cfrpn {

namespace {

constexpr std::array<char, 4> kMagic{'C', 'F', 'R', 'P'};
constexpr std::uint8_t kDtypeF32 = 1;

void write_tensor(io::Writer& w, const Tensor<float>& t) {
    for (std::size_t e : t.shape().extents()) w.u64(e);
    w.raw(t.data().data(), t.size() * sizeof(float));
}

Tensor<float> read_tensor(io::Reader& r) {
    Shape s;
    s.n = r.u64();
    s.c = r.u64();
    s.h = r.u64();
    s.w = r.u64();
    // guard the multiplication before allocating
    r.require(s.numel() <= (SIZE_MAX / sizeof(float)) ? s.numel() * sizeof(float) : SIZE_MAX);
    Tensor<float> t(s);
    r.raw(t.data().data(), t.size() * sizeof(float));
    return t;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamStore<float>& params, const Adam<float>* optimizer) {
    io::Writer w;
    w.magic(kMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        w.str(p.name);
        w.u8(kDtypeF32);
        w.u8(p.decay ? 1 : 0);
        write_tensor(w, p.value);
    }
    const bool has_opt = optimizer != nullptr && optimizer->steps() > 0;
    w.u8(has_opt ? 1 : 0);
    if (has_opt) {
        const AdamConfig& c = optimizer->config();
        w.u64(optimizer->steps());
        w.f64(c.lr);
        w.f64(c.beta1);
        w.f64(c.beta2);
        w.f64(c.eps);
        w.f64(c.weight_decay);
        w.u8(c.decoupled ? 1 : 0);
        if (optimizer->first_moments().size() != params.size()) {
            throw CheckpointError("checkpoint: optimizer state does not cover the parameter store");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            write_tensor(w, optimizer->first_moments()[i]);
            write_tensor(w, optimizer->second_moments()[i]);
        }
    }
    return w.bytes();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
    try {
        io::Reader r(bytes, source);
        r.expect_magic(kMagic);
        const auto version = r.u32();
        if (version != kCheckpointVersion) {
            throw CheckpointError(source + ": format version " + std::to_string(version) + ", this build reads " +
                                  std::to_string(kCheckpointVersion));
        }
        Checkpoint ck;
        const auto count = r.u32();
        for (std::uint32_t i = 0; i < count; ++i) {
            std::string name = r.str();
            const auto dtype = r.u8();
            if (dtype != kDtypeF32) {
                throw CheckpointError(source + ": parameter " + name + " has unknown dtype tag " + std::to_string(dtype));
            }
            const bool decay = r.u8() != 0;
            ck.params.add(std::move(name), read_tensor(r), decay);
        }
        if (r.u8() != 0) {
            OptimizerState s;
            s.steps = r.u64();
            s.config.lr = r.f64();
            s.config.beta1 = r.f64();
            s.config.beta2 = r.f64();
            s.config.eps = r.f64();
            s.config.weight_decay = r.f64();
            s.config.decoupled = r.u8() != 0;
            for (std::uint32_t i = 0; i < count; ++i) {
                s.m.push_back(read_tensor(r));
                s.v.push_back(read_tensor(r));
            }
            ck.optimizer = std::move(s);
        }
        r.expect_end();
        return ck;
    } catch (const CheckpointError&) {
        throw;
    } catch (const DataError& e) {
        throw CheckpointError(e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params, const Adam<float>* optimizer) {
    const auto bytes = encode_checkpoint(params, optimizer);
    // write-then-rename so an interrupted save never replaces a good checkpoint
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("write failed on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = read_file(path);
    } catch (const DataError& e) {
        throw CheckpointError(e.what());
    }
    return decode_checkpoint(bytes, path.string());
}

void apply_checkpoint(const Checkpoint& ckpt, ParamStore<float>& params, Adam<float>* optimizer) {
    if (ckpt.params.size() != params.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, model has " +
                              std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& src = ckpt.params[ParamId{i}];
        auto& dst = params[ParamId{i}];
        if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
            throw CheckpointError("checkpoint parameter " + src.name + " " + src.value.shape().str() +
                                  " does not match model parameter " + dst.name + " " + dst.value.shape().str());
        }
        dst.value = src.value;
        dst.decay = src.decay;
    }
    if (optimizer != nullptr && ckpt.optimizer) {
        const auto& s = *ckpt.optimizer;
        optimizer->restore(s.config, s.steps, s.m, s.v);
    }
}

}  // namespace cfrpn
