#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace vlnbias {

// Fixed-point with a fixed number of decimals ("-0.0" normalised to "0.0").
std::string format_fixed(double value, int decimals);

// Shortest text that parses back to the same double.
std::string format_roundtrip(double value);

double parse_double(std::string_view text);

std::vector<std::string> split_csv_line(std::string_view line);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace vlnbias
