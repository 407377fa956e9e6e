#include "e2eloc/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace e2eloc {

namespace {

constexpr char kMagic[4] = {'E', '2', 'L', 'C'};
constexpr uint32_t kVersion = 1;

void write_raw(std::ofstream& out, const void* p, size_t n) {
    out.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}

void read_raw(std::ifstream& in, void* p, size_t n) {
    in.read(reinterpret_cast<char*>(p), std::streamsize(n));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
}

}  // namespace

void save_checkpoint(const std::string& path, E2EModel& model, const ExperimentConfig& cfg) {
    auto named = model.named_parameters();

    nlohmann::json header;
    nlohmann::json config_json;
    for (const auto& [k, v] : config_entries(cfg)) config_json[k] = v;
    header["config"] = config_json;
    header["centers"] = {{"num_classes", model.centers.num_classes},
                         {"dim", model.centers.dim}};
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : named)
        tensors.push_back({{"name", name}, {"shape", t.shape()}});
    tensors.push_back(
        {{"name", "centers"}, {"shape", {model.centers.num_classes, model.centers.dim}}});
    header["tensors"] = tensors;
    header["dtype"] = "f32";

    const std::string hdr = header.dump();
    std::ofstream out(path, std::ios::binary);
    check(bool(out), "save_checkpoint: cannot open " + path);
    write_raw(out, kMagic, 4);
    write_raw(out, &kVersion, sizeof(kVersion));
    const uint64_t hdr_len = hdr.size();
    write_raw(out, &hdr_len, sizeof(hdr_len));
    write_raw(out, hdr.data(), hdr.size());
    for (const auto& [name, t] : named)
        write_raw(out, t.values().data(), t.numel() * sizeof(float));
    write_raw(out, model.centers.values.data(), model.centers.values.size() * sizeof(float));
    check(bool(out), "save_checkpoint: write failed for " + path);
}

E2EModel load_checkpoint(const std::string& path, ExperimentConfig* cfg_out) {
    std::ifstream in(path, std::ios::binary);
    check(bool(in), "load_checkpoint: cannot open " + path);
    char magic[4];
    read_raw(in, magic, 4);
    check(std::memcmp(magic, kMagic, 4) == 0, "load_checkpoint: bad magic in " + path);
    uint32_t version = 0;
    read_raw(in, &version, sizeof(version));
    check(version == kVersion, "load_checkpoint: unsupported version");
    uint64_t hdr_len = 0;
    read_raw(in, &hdr_len, sizeof(hdr_len));
    std::string hdr(hdr_len, '\0');
    read_raw(in, hdr.data(), hdr_len);
    const nlohmann::json header = nlohmann::json::parse(hdr);

    ExperimentConfig cfg;
    for (const auto& [key, value] : header.at("config").items())
        apply_config_line(cfg, key, value.get<std::string>());
    if (cfg_out) *cfg_out = cfg;

    E2EModel model = build_model(cfg);
    auto named = model.named_parameters();
    size_t named_idx = 0;
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<int>>();
        if (name == "centers") {
            check(shape.size() == 2 && shape[0] == model.centers.num_classes &&
                      shape[1] == model.centers.dim,
                  "load_checkpoint: center shape mismatch");
            read_raw(in, model.centers.values.data(),
                     model.centers.values.size() * sizeof(float));
            continue;
        }
        check(named_idx < named.size(), "load_checkpoint: unexpected tensor " + name);
        auto& [expect_name, tensor] = named[named_idx++];
        check(name == expect_name, "load_checkpoint: tensor order mismatch at " + name);
        check(Shape(shape.begin(), shape.end()) == tensor.shape(),
              "load_checkpoint: shape mismatch for " + name);
        read_raw(in, tensor.values().data(), tensor.numel() * sizeof(float));
    }
    check(named_idx == named.size(), "load_checkpoint: missing tensors");
    return model;
}

}  // namespace e2eloc
