#include "stepviz/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace stepviz {

namespace {

namespace fs = std::filesystem;

// The payload is defined as little-endian. On big-endian hosts the bytes are
// swapped explicitly; on the (typical) little-endian host this is a memcpy.
bool host_little_endian() {
    const std::uint16_t probe = 1;
    std::uint8_t b;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

void encode_f64_le(const double* src, std::size_t n, std::vector<char>& out) {
    out.resize(n * 8);
    std::memcpy(out.data(), src, n * 8);
    if (!host_little_endian()) {
        for (std::size_t i = 0; i < n; ++i)
            std::reverse(out.begin() + static_cast<long>(i * 8),
                         out.begin() + static_cast<long>(i * 8 + 8));
    }
}

void decode_f64_le(std::vector<char>& bytes, double* dst, std::size_t n) {
    if (!host_little_endian()) {
        for (std::size_t i = 0; i < n; ++i)
            std::reverse(bytes.begin() + static_cast<long>(i * 8),
                         bytes.begin() + static_cast<long>(i * 8 + 8));
    }
    std::memcpy(dst, bytes.data(), n * 8);
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
    nlohmann::json header;
    header["shape"] = t.shape();
    header["dtype"] = "f64";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out << header.dump() << '\n';
    std::vector<char> payload;
    encode_f64_le(t.data(), t.numel(), payload);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("short write: " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw IoError("missing header: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception&) {
        throw IoError("malformed header: " + path);
    }
    if (!header.contains("dtype") || header["dtype"] != "f64")
        throw IoError("unsupported dtype in " + path);
    std::vector<int> shape = header.value("shape", std::vector<int>{});
    if (shape.empty()) throw IoError("missing shape in " + path);
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw IoError("bad extent in " + path);
        n *= static_cast<std::size_t>(e);
    }
    std::vector<char> bytes(n * 8);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size())
        throw IoError("truncated payload: " + path);
    std::vector<double> data(n);
    decode_f64_le(bytes, data.data(), n);
    return Tensor::from_data(std::move(shape), std::move(data));
}

void write_ppm(const std::string& path, const Tensor& image, int height, int width) {
    if (image.numel() != static_cast<std::size_t>(height) * width * 3)
        throw DimError("write_ppm: size does not match height*width*3");
    std::ostringstream out;
    out << "P3\n" << width << ' ' << height << "\n255\n";
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = image.data()[(static_cast<std::size_t>(y) * width + x) * 3 + c];
                const double clamped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                out << static_cast<int>(std::lround(clamped * 255.0));
                out << (c == 2 ? (x == width - 1 ? "\n" : " ") : " ");
            }
        }
    }
    write_text_file(path, out.str());
}

void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     const nlohmann::json& meta) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["meta"] = meta;
    std::vector<std::string> names;
    names.reserve(tensors.size());
    for (const auto& [name, tensor] : tensors) {
        names.push_back(name);
        write_tensor((fs::path(dir) / (name + ".tns")).string(), tensor);
    }
    manifest["tensors"] = names;
    write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
    const fs::path manifest_path = fs::path(dir) / "manifest.json";
    if (!fs::exists(manifest_path)) throw IoError("missing checkpoint manifest: " + manifest_path.string());
    Checkpoint ckpt;
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text_file(manifest_path.string()));
    } catch (const nlohmann::json::exception&) {
        throw IoError("malformed checkpoint manifest: " + manifest_path.string());
    }
    ckpt.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& name : manifest.value("tensors", std::vector<std::string>{}))
        ckpt.tensors.emplace(name, read_tensor((fs::path(dir) / (name + ".tns")).string()));
    return ckpt;
}

void load_into(const Checkpoint& ckpt, const std::vector<std::pair<std::string, Tensor>>& params) {
    for (const auto& [name, param] : params) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) throw IoError("checkpoint is missing tensor: " + name);
        const Tensor& stored = it->second;
        if (stored.shape() != param.shape())
            throw IoError("checkpoint tensor shape mismatch for: " + name);
        Tensor dst = param;  // handles share storage, so this writes through
        std::copy(stored.data(), stored.data() + stored.numel(), dst.data());
    }
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out << content;
    if (!out) throw IoError("short write: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace stepviz
