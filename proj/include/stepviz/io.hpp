#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stepviz/tensor.hpp"

namespace stepviz {

// `.tns` format: a one-line JSON header {"shape":[...],"dtype":"f64"} followed
// by '\n' and the raw little-endian f64 payload in row-major order.
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

// PPM (P3, 255 max) export of an image tensor shaped [h*w, 3] or [h, w, 3],
// values clamped to [0,1] and rounded to 8-bit.
void write_ppm(const std::string& path, const Tensor& image, int height, int width);

// A checkpoint is a directory holding manifest.json plus one .tns file per
// named tensor. The manifest carries caller-provided metadata under "meta"
// and the tensor name list under "tensors".
void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     const nlohmann::json& meta);

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    nlohmann::json meta;
};

Checkpoint load_checkpoint(const std::string& dir);

// Copies stored tensor values into live parameters by name. A parameter
// missing from the checkpoint or stored with a different shape throws
// IoError naming it; extra stored tensors are ignored.
void load_into(const Checkpoint& ckpt, const std::vector<std::pair<std::string, Tensor>>& params);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace stepviz
