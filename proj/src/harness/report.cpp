#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "sslpoison/harness.hpp"
#include "sslpoison/image_io.hpp"

namespace fs = std::filesystem;

namespace sslpoison {

using nlohmann::json;

namespace {

// 5x7 bitmap glyphs, one string per row, '#' set.
const std::map<char, std::array<const char*, 7>>& glyphs() {
  static const std::map<char, std::array<const char*, 7>> g{
      {'0', {" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "}},
      {'1', {"  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "}},
      {'2', {" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"}},
      {'3', {"#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "}},
      {'4', {"   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "}},
      {'5', {"#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "}},
      {'6', {"  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "}},
      {'7', {"#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "}},
      {'8', {" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "}},
      {'9', {" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "}},
      {'A', {" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"}},
      {'B', {"#### ", "#   #", "#   #", "#### ", "#   #", "#   #", "#### "}},
      {'C', {" ### ", "#   #", "#    ", "#    ", "#    ", "#   #", " ### "}},
      {'D', {"#### ", "#   #", "#   #", "#   #", "#   #", "#   #", "#### "}},
      {'E', {"#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"}},
      {'F', {"#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#    "}},
      {'G', {" ### ", "#   #", "#    ", "# ###", "#   #", "#   #", " ####"}},
      {'H', {"#   #", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"}},
      {'I', {" ### ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "}},
      {'J', {"  ###", "   # ", "   # ", "   # ", "   # ", "#  # ", " ##  "}},
      {'K', {"#   #", "#  # ", "# #  ", "##   ", "# #  ", "#  # ", "#   #"}},
      {'L', {"#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"}},
      {'M', {"#   #", "## ##", "# # #", "# # #", "#   #", "#   #", "#   #"}},
      {'N', {"#   #", "#   #", "##  #", "# # #", "#  ##", "#   #", "#   #"}},
      {'O', {" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "}},
      {'P', {"#### ", "#   #", "#   #", "#### ", "#    ", "#    ", "#    "}},
      {'Q', {" ### ", "#   #", "#   #", "#   #", "# # #", "#  # ", " ## #"}},
      {'R', {"#### ", "#   #", "#   #", "#### ", "# #  ", "#  # ", "#   #"}},
      {'S', {" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "}},
      {'T', {"#####", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  "}},
      {'U', {"#   #", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "}},
      {'V', {"#   #", "#   #", "#   #", "#   #", "#   #", " # # ", "  #  "}},
      {'W', {"#   #", "#   #", "#   #", "# # #", "# # #", "# # #", " # # "}},
      {'X', {"#   #", "#   #", " # # ", "  #  ", " # # ", "#   #", "#   #"}},
      {'Y', {"#   #", "#   #", " # # ", "  #  ", "  #  ", "  #  ", "  #  "}},
      {'Z', {"#####", "    #", "   # ", "  #  ", " #   ", "#    ", "#####"}},
      {'.', {"     ", "     ", "     ", "     ", "     ", " ##  ", " ##  "}},
      {'-', {"     ", "     ", "     ", "#####", "     ", "     ", "     "}},
      {'+', {"     ", "  #  ", "  #  ", "#####", "  #  ", "  #  ", "     "}},
      {':', {"     ", " ##  ", " ##  ", "     ", " ##  ", " ##  ", "     "}},
      {'_', {"     ", "     ", "     ", "     ", "     ", "     ", "#####"}},
      {'%', {"##   ", "##  #", "   # ", "  #  ", " #   ", "#  ##", "   ##"}},
      {'/', {"     ", "    #", "   # ", "  #  ", " #   ", "#    ", "     "}},
  };
  return g;
}

struct Canvas {
  int width;
  int height;
  std::vector<std::uint8_t> rgb;

  Canvas(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 255) {}

  void set(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    auto* p = &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }

  void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void text(int x, int y, const std::string& s, std::array<std::uint8_t, 3> c) {
    for (char raw : s) {
      const char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
      const auto it = glyphs().find(ch);
      if (it != glyphs().end()) {
        for (int r = 0; r < 7; ++r) {
          for (int k = 0; k < 5; ++k) {
            if (it->second[r][k] == '#') set(x + k, y + r, c);
          }
        }
      }
      x += 6;
    }
  }
};

std::string short_number(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

std::string cell(const std::optional<double>& v, int precision = 2) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

std::string attack_label(const json& config) {
  const auto& a = config.at("attack");
  const auto kind = a.at("kind").get<std::string>();
  if (kind == "none") return "clean";
  std::string label = kind;
  if (kind != "ours") label += a.at("mode") == "consistent" ? "-c" : "-i";
  if (a.at("situation") != "default") label += "/" + a.at("situation").get<std::string>();
  return label;
}

std::string dataset_key(const json& config) {
  const auto& d = config.at("data");
  std::string key = d.at("dataset").get<std::string>();
  if (key == "toy-shapes") key += "-seed" + std::to_string(d.at("toy").at("seed").get<std::uint64_t>());
  return key;
}

}  // namespace

void plot_series(const std::vector<std::pair<std::string, std::vector<double>>>& series, const fs::path& path) {
  constexpr int kPanelW = 320, kPanelH = 160, kMargin = 12;
  const int panels = std::max<int>(1, static_cast<int>(series.size()));
  Canvas canvas(kPanelW, kPanelH * panels);
  const std::array<std::uint8_t, 3> ink{30, 30, 30}, grid{200, 200, 200}, curve{200, 40, 40};
  for (int p = 0; p < static_cast<int>(series.size()); ++p) {
    const auto& [name, ys] = series[p];
    const int top = p * kPanelH + kMargin + 10, bottom = (p + 1) * kPanelH - kMargin;
    const int left = kMargin, right = kPanelW - kMargin;
    canvas.line(left, top, right, top, grid);
    canvas.line(left, bottom, right, bottom, ink);
    canvas.line(left, top, left, bottom, ink);
    canvas.line(right, top, right, bottom, grid);
    std::vector<double> finite;
    for (double y : ys) {
      if (std::isfinite(y)) finite.push_back(y);
    }
    std::string caption = name + " N " + std::to_string(ys.size());
    if (!finite.empty()) {
      const auto [lo_it, hi_it] = std::minmax_element(finite.begin(), finite.end());
      const double lo = *lo_it, hi = *hi_it, span = hi > lo ? hi - lo : 1.0;
      caption += " MIN " + short_number(lo) + " MAX " + short_number(hi);
      const int n = static_cast<int>(ys.size());
      auto px = [&](int i) { return n == 1 ? (left + right) / 2 : left + (right - left) * i / (n - 1); };
      auto py = [&](double y) { return bottom - static_cast<int>(std::lround((y - lo) / span * (bottom - top))); };
      for (int i = 0; i < n; ++i) {
        if (!std::isfinite(ys[i])) continue;
        if (i + 1 < n && std::isfinite(ys[i + 1])) canvas.line(px(i), py(ys[i]), px(i + 1), py(ys[i + 1]), curve);
        for (int d = -1; d <= 1; ++d) {
          canvas.set(px(i) + d, py(ys[i]), curve);
          canvas.set(px(i), py(ys[i]) + d, curve);
        }
      }
    }
    canvas.text(left, p * kPanelH + 4, caption, ink);
  }
  write_png(path, ImageShape{canvas.height, canvas.width, 3}, canvas.rgb);
}

void write_report(const std::vector<ResultRecord>& records, const fs::path& out_dir) {
  if (records.empty()) throw HarnessError("report needs at least one result record");
  fs::create_directories(out_dir);

  std::map<std::string, std::vector<const ResultRecord*>> groups;
  for (const auto& r : records) groups[dataset_key(r.config)].push_back(&r);

  std::ofstream md(out_dir / "table.md");
  std::ofstream csv(out_dir / "table.csv");
  std::ofstream cmp(out_dir / "comparison.md");
  csv << "dataset,hash,status,algorithm,attack,seed,sl_ca,ca,asr,psnr,ssim,linf\n";
  for (const auto& [dataset, group] : groups) {
    md << "## " << dataset << "\n\n"
       << "| run | algorithm | attack | seed | SL CA | CA | ASR | PSNR | SSIM | L-inf | status |\n"
       << "|---|---|---|---|---|---|---|---|---|---|---|\n";
    // algorithm -> attack -> (CA, ASR) lists, for the pivoted comparison.
    std::map<std::string, std::map<std::string, std::vector<std::pair<double, double>>>> pivot;
    std::vector<std::string> attack_order;
    for (const auto* r : group) {
      const auto& m = r->metrics;
      const auto alg = r->config.at("ssl").at("algorithm").get<std::string>();
      const auto attack = attack_label(r->config);
      const auto seed = r->config.at("seed").get<std::uint64_t>();
      md << "| " << r->config_hash << " | " << alg << " | " << attack << " | " << seed << " | " << cell(m.sl_ca)
         << " | " << cell(m.ca) << " | " << cell(m.asr) << " | " << cell(m.psnr) << " | " << cell(m.ssim, 4) << " | "
         << cell(m.linf) << " | " << r->status << " |\n";
      csv << dataset << "," << r->config_hash << "," << r->status << "," << alg << "," << attack << "," << seed << ","
          << cell(m.sl_ca, 6) << "," << cell(m.ca, 6) << "," << cell(m.asr, 6) << "," << cell(m.psnr, 6) << ","
          << cell(m.ssim, 6) << "," << cell(m.linf, 6) << "\n";
      if (r->status == "ok" && m.asr) {
        pivot[alg][attack].emplace_back(m.ca, *m.asr);
        if (std::find(attack_order.begin(), attack_order.end(), attack) == attack_order.end()) {
          attack_order.push_back(attack);
        }
      }

      std::vector<std::pair<std::string, std::vector<double>>> curves{{"CA", m.ca_curve}};
      if (!m.asr_curve.empty()) curves.emplace_back("ASR", m.asr_curve);
      if (!m.d_curve.empty()) curves.emplace_back("D", m.d_curve);
      if (!m.c_curve.empty()) curves.emplace_back("C", m.c_curve);
      plot_series(curves, out_dir / ("curves-" + r->config_hash + ".png"));
      std::ofstream cc(out_dir / ("curves-" + r->config_hash + ".csv"));
      cc << "epoch,ca,asr,d,c\n";
      for (std::size_t e = 0; e < m.ca_curve.size(); ++e) {
        auto at = [&](const std::vector<double>& v) { return e < v.size() ? short_number(v[e]) : std::string(); };
        cc << e << "," << at(m.ca_curve) << "," << at(m.asr_curve) << "," << at(m.d_curve) << "," << at(m.c_curve)
           << "\n";
      }
    }
    md << "\n";

    cmp << "## " << dataset << " (mean CA / ASR over seeds)\n\n| algorithm |";
    for (const auto& a : attack_order) cmp << " " << a << " |";
    cmp << "\n|---|";
    for (std::size_t i = 0; i < attack_order.size(); ++i) cmp << "---|";
    cmp << "\n";
    for (const auto& [alg, by_attack] : pivot) {
      cmp << "| " << alg << " |";
      for (const auto& a : attack_order) {
        const auto it = by_attack.find(a);
        if (it == by_attack.end()) {
          cmp << " - |";
          continue;
        }
        double ca = 0.0, asr = 0.0;
        for (const auto& [c, s] : it->second) {
          ca += c;
          asr += s;
        }
        const double n = static_cast<double>(it->second.size());
        cmp << " " << cell(ca / n) << " / " << cell(asr / n) << " |";
      }
      cmp << "\n";
    }
    cmp << "\n";
  }
}

}  // namespace sslpoison
