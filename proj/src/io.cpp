#include "geotok/io.hpp"

#include <fstream>
#include <sstream>

#include "geotok/error.hpp"

namespace geotok::io {

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

std::string hash_file(const std::filesystem::path& path) { return hex64(fnv1a64(read_file(path))); }

nlohmann::json read_json(const std::filesystem::path& path) {
    const auto text = read_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

void write_manifest(const std::filesystem::path& out_dir, const std::string& command, const nlohmann::json& config,
                    const nlohmann::json& seed, const std::vector<std::filesystem::path>& inputs,
                    const std::vector<std::filesystem::path>& outputs) {
    auto files = [](const std::vector<std::filesystem::path>& ps) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& p : ps) arr.push_back({{"path", p.string()}, {"fnv1a64", hash_file(p)}});
        return arr;
    };
    nlohmann::json m = {{"command", command},
                        {"version", kVersion},
                        {"config", config},
                        {"config_hash", hex64(fnv1a64(config.dump()))},
                        {"seed", seed},
                        {"inputs", files(inputs)},
                        {"outputs", files(outputs)}};
    write_json(out_dir / "manifest.json", m);
}

}  // namespace geotok::io
