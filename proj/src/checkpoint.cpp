#include "geotok/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <set>

#include "geotok/error.hpp"

namespace geotok::checkpoint {

namespace {

template <typename U>
void put_le(std::string& buf, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

constexpr std::size_t kHeader = 4 + 4 + 8;

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void write(std::ostream& out, const Checkpoint& ckpt) {
    nlohmann::json entries = nlohmann::json::array();
    std::set<std::string> seen;
    for (const auto& t : ckpt.tensors) {
        if (!seen.insert(t.name).second) throw InvalidInput("checkpoint: duplicate tensor '" + t.name + "'");
        if (tensor::numel(t.shape) != t.values.size()) {
            throw ShapeError("checkpoint: tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                             " values for shape " + tensor::to_string(t.shape));
        }
        entries.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"}});
    }
    const std::string manifest = nlohmann::json{{"meta", ckpt.meta}, {"tensors", entries}}.dump();

    std::string buf(kMagic, 4);
    put_le<std::uint32_t>(buf, kVersion);
    put_le<std::uint64_t>(buf, manifest.size());
    buf += manifest;
    for (const auto& t : ckpt.tensors) {
        for (float f : t.values) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(f));
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("checkpoint: write failed");
}

Checkpoint read(std::istream& in) {
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < kHeader) throw FormatError("checkpoint: truncated header");
    if (std::memcmp(p, kMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
    const auto version = get_le<std::uint32_t>(p + 4);
    if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const auto mlen = get_le<std::uint64_t>(p + 8);
    if (mlen > bytes.size() - kHeader) throw FormatError("checkpoint: truncated manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + kHeader, bytes.begin() + static_cast<std::ptrdiff_t>(kHeader + mlen));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: manifest: ") + e.what());
    }

    Checkpoint ck;
    std::size_t off = kHeader + mlen;
    try {
        ck.meta = manifest.at("meta");
        for (const auto& e : manifest.at("tensors")) {
            StoredTensor t;
            t.name = e.at("name").get<std::string>();
            t.shape = e.at("shape").get<tensor::Shape>();
            if (e.at("dtype").get<std::string>() != "f32") throw FormatError("checkpoint: unsupported dtype for '" + t.name + "'");
            const std::size_t n = tensor::numel(t.shape);
            if (n > (bytes.size() - off) / 4) throw FormatError("checkpoint: truncated payload for '" + t.name + "'");
            t.values.resize(n);
            for (std::size_t i = 0; i < n; ++i, off += 4) t.values[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + off));
            ck.tensors.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: manifest: ") + e.what());
    }
    if (off != bytes.size()) {
        throw FormatError("checkpoint: " + std::to_string(bytes.size() - off) + " trailing bytes after payload");
    }
    return ck;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write(out, ckpt);
}

Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return read(in);
}

template <typename T>
void append_tensors(Checkpoint& ckpt, std::span<const model::NamedTensor<T>> tensors, const std::string& prefix) {
    for (const auto& nt : tensors) {
        StoredTensor st;
        st.name = prefix + nt.name;
        st.shape = nt.tensor.shape();
        st.values.reserve(nt.tensor.numel());
        for (auto v : nt.tensor.values()) st.values.push_back(static_cast<float>(v));
        ckpt.tensors.push_back(std::move(st));
    }
}

template <typename T>
std::vector<model::NamedTensor<T>> extract_tensors(const Checkpoint& ckpt, const std::string& prefix) {
    std::vector<model::NamedTensor<T>> out;
    for (const auto& st : ckpt.tensors) {
        if (st.name.compare(0, prefix.size(), prefix) != 0) continue;
        std::vector<T> vals(st.values.begin(), st.values.end());
        out.push_back({st.name.substr(prefix.size()), tensor::Tensor<T>::from(st.shape, std::move(vals))});
    }
    return out;
}

template <typename T>
Checkpoint from_model(const model::LocationModel<T>& m, nlohmann::json extra_meta) {
    Checkpoint ck;
    ck.meta = std::move(extra_meta);
    ck.meta["model"] = model::config_to_json(m.config());
    const auto params = m.named_parameters();
    append_tensors<T>(ck, params, "model.");
    return ck;
}

template <typename T>
model::LocationModel<T> to_model(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("model")) throw FormatError("checkpoint: no model config in meta");
    model::LocationModel<T> m(model::config_from_json(ckpt.meta.at("model")), 0);
    load_into(m, ckpt);
    return m;
}

template <typename T>
void load_into(model::LocationModel<T>& m, const Checkpoint& ckpt) {
    const auto src = extract_tensors<T>(ckpt, "model.");
    const auto dst = m.named_parameters();
    for (const auto& s : src) {
        const bool known = std::any_of(dst.begin(), dst.end(), [&](const auto& d) { return d.name == s.name; });
        if (!known) throw ShapeError("load: checkpoint tensor '" + s.name + "' has no counterpart in the model");
    }
    m.load_values(src);
}

#define GEOTOK_CKPT_INSTANTIATE(T)                                                                           \
    template void append_tensors<T>(Checkpoint&, std::span<const model::NamedTensor<T>>, const std::string&); \
    template std::vector<model::NamedTensor<T>> extract_tensors<T>(const Checkpoint&, const std::string&);   \
    template Checkpoint from_model<T>(const model::LocationModel<T>&, nlohmann::json);                       \
    template model::LocationModel<T> to_model<T>(const Checkpoint&);                                         \
    template void load_into<T>(model::LocationModel<T>&, const Checkpoint&);

GEOTOK_CKPT_INSTANTIATE(float)
GEOTOK_CKPT_INSTANTIATE(double)

}  // namespace geotok::checkpoint
