#include "vaedg/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <sstream>

namespace vaedg {

namespace {

constexpr char kMagic[4] = {'V', 'D', 'G', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw InvalidInput("truncated checkpoint file " + what);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

ParamGroup parse_group(const std::string& s) {
  if (s == "encoder") return ParamGroup::encoder;
  if (s == "decoder") return ParamGroup::decoder;
  if (s == "head") return ParamGroup::head;
  throw InvalidInput("unknown parameter group in checkpoint: " + s);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const ParameterSet<float>& params, const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);
  std::ofstream m(dir / "meta.txt");
  require(static_cast<bool>(m), "cannot write checkpoint metadata in " + dir.string());
  m << "step=" << meta.step << "\nseed=" << meta.seed << "\nconfig_digest=" << meta.config_digest << "\n";
  for (const auto& p : params) {
    m << "param=" << p.name << ' ' << to_string(p.group) << "\n";
    std::ofstream out(dir / (p.name + ".bin"), std::ios::binary);
    require(static_cast<bool>(out), "cannot write checkpoint file for " + p.name);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(p.value.shape.size()));
    for (int d : p.value.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.value.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream m(dir / "meta.txt");
  require(static_cast<bool>(m), "missing checkpoint metadata in " + dir.string());
  Checkpoint ck;
  std::string line;
  while (std::getline(m, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq);
    const auto value = line.substr(eq + 1);
    if (key == "step") {
      ck.meta.step = std::stol(value);
    } else if (key == "seed") {
      ck.meta.seed = std::stoull(value);
    } else if (key == "config_digest") {
      ck.meta.config_digest = value;
    } else if (key == "param") {
      std::istringstream ss(value);
      std::string name, group;
      ss >> name >> group;
      const std::string file = (dir / (name + ".bin")).string();
      std::ifstream in(file, std::ios::binary);
      require(static_cast<bool>(in), "missing checkpoint file " + file);
      char magic[4];
      require(in.read(magic, 4) && std::equal(magic, magic + 4, kMagic), "bad magic in " + file);
      require(get_u32(in, file) == kVersion, "unsupported checkpoint version in " + file);
      const std::uint32_t rank = get_u32(in, file);
      std::vector<int> shape;
      for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(get_u32(in, file)));
      const auto idx = ck.params.add(name, parse_group(group), shape);
      for (auto& v : ck.params[idx].value.data) v = std::bit_cast<float>(get_u32(in, file));
      require(in.peek() == std::char_traits<char>::eof(), "trailing bytes in " + file);
    }
  }
  require(ck.params.size() > 0, "checkpoint in " + dir.string() + " has no parameters");
  return ck;
}

}  // namespace vaedg
