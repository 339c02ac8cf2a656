// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#include "patchpool/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace patchpool {

namespace {

const char kMagic[] = "PCNV1\n";

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

uint32_t read_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw ParseError(path + ": truncated checkpoint");
    }
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

uint64_t read_u64(std::istream& is, const std::string& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) {
        throw ParseError(path + ": truncated checkpoint");
    }
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

double read_f64(std::istream& is, const std::string& path) {
    uint64_t bits = read_u64(is, path);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace

std::string serialize_config(const ModelConfig& c) {
    std::ostringstream os;
    os << "width=" << c.width << "\n";
    os << "depth=" << c.depth << "\n";
    os << "num_classes=" << c.num_classes << "\n";
    os << "token_mode=" << to_string(c.token_mode) << "\n";
    os << "norm_kind=" << to_string(c.norm_kind) << "\n";
    os << "stem_kind=" << to_string(c.stem_kind) << "\n";
    os << "head_mode=" << to_string(c.head_mode) << "\n";
    os << "attention_heads=" << c.attention_heads << "\n";
    os << "drop_path=" << fmt_double(c.drop_path) << "\n";
    os << "layerscale_init=" << fmt_double(c.layerscale_init) << "\n";
    os << "se_reduction=" << c.se_reduction << "\n";
    os << "ffn_ratio=" << c.ffn_ratio << "\n";
    os << "ln_eps=" << fmt_double(c.ln_eps) << "\n";
    os << "bn_eps=" << fmt_double(c.bn_eps) << "\n";
    os << "bn_momentum=" << fmt_double(c.bn_momentum) << "\n";
    return os.str();
}

ModelConfig deserialize_config(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParseError("config line " + std::to_string(lineno) + " has no '='");
        }
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        try {
            if (key == "width") c.width = std::stoll(val);
            else if (key == "depth") c.depth = std::stoll(val);
            else if (key == "num_classes") c.num_classes = std::stoll(val);
            else if (key == "token_mode") c.token_mode = token_mode_from_string(val);
            else if (key == "norm_kind") c.norm_kind = norm_kind_from_string(val);
            else if (key == "stem_kind") c.stem_kind = stem_kind_from_string(val);
            else if (key == "head_mode") c.head_mode = head_mode_from_string(val);
            else if (key == "attention_heads") c.attention_heads = std::stoll(val);
            else if (key == "drop_path") c.drop_path = std::stod(val);
            else if (key == "layerscale_init") c.layerscale_init = std::stod(val);
            else if (key == "se_reduction") c.se_reduction = std::stoll(val);
            else if (key == "ffn_ratio") c.ffn_ratio = std::stoll(val);
            else if (key == "ln_eps") c.ln_eps = std::stod(val);
            else if (key == "bn_eps") c.bn_eps = std::stod(val);
            else if (key == "bn_momentum") c.bn_momentum = std::stod(val);
            else throw ParseError("unknown config key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ParseError("config key '" + key + "' has malformed value '" + val + "'");
        }
    }
    return c;
}

void save_checkpoint(const PatchConvNet& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, sizeof(kMagic) - 1);
    const std::string cfg = serialize_config(model.config());
    write_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    write_u64(os, model.params().size());
    for (const NamedParam& p : model.params()) {
        write_u32(os, static_cast<uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_u32(os, static_cast<uint32_t>(p.tensor.shape().size()));
        for (int64_t d : p.tensor.shape()) write_u64(os, static_cast<uint64_t>(d));
        for (int64_t i = 0; i < p.tensor.numel(); ++i) write_f64(os, p.tensor.data()[i]);
    }
    if (!os) throw DataError("write failed for checkpoint: " + path);
}

PatchConvNet load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[6];
    if (!is.read(magic, 6) || std::memcmp(magic, kMagic, 6) != 0) {
        throw ParseError(path + ": not a PCNV1 checkpoint");
    }
    const uint64_t cfg_len = read_u64(is, path);
    std::string cfg_text(cfg_len, '\0');
    if (!is.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len))) {
        throw ParseError(path + ": truncated config block");
    }
    ModelConfig config = deserialize_config(cfg_text);
    PatchConvNet model(config, 0);

    const uint64_t count = read_u64(is, path);
    if (count != model.params().size()) {
        throw ParseError(path + ": tensor count " + std::to_string(count) +
                         " does not match the architecture (" +
                         std::to_string(model.params().size()) + ")");
    }
    for (NamedParam& p : model.params()) {
        const uint32_t name_len = read_u32(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw ParseError(path + ": truncated name");
        if (name != p.name) {
            throw ParseError(path + ": tensor '" + name + "' where '" + p.name +
                             "' was expected");
        }
        const uint32_t rank = read_u32(is, path);
        Shape shape(rank);
        for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(read_u64(is, path));
        if (shape != p.tensor.shape()) {
            throw ParseError(path + ": tensor '" + name + "' shape " + shape_str(shape) +
                             " does not match " + shape_str(p.tensor.shape()));
        }
        for (int64_t i = 0; i < p.tensor.numel(); ++i) p.tensor.data()[i] = read_f64(is, path);
    }
    return model;
}

}  // namespace patchpool
