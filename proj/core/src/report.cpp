#include <cstdio>
#include <fstream>
#include <sstream>

#include "infosteer/analysis.hpp"
#include "infosteer/error.hpp"
#include "infosteer/text.hpp"
#include "infosteer/tokenizer.hpp"

namespace infosteer {

std::string display_token(int id) {
    switch (id) {
        case ByteTokenizer::kPad:
            return "<pad>";
        case ByteTokenizer::kBos:
            return "<bos>";
        case ByteTokenizer::kEos:
            return "<eos>";
        default:
            break;
    }
    if (id < 0 || id > 255) {
        return "<" + std::to_string(id) + ">";
    }
    if (id == '\n') {
        return "\\n";
    }
    if (id == '\t') {
        return "\\t";
    }
    if (id == '\\') {
        return "\\\\";
    }
    if (id >= 0x20 && id < 0x7f) {
        return std::string(1, static_cast<char>(id));
    }
    char buf[8];
    std::snprintf(buf, sizeof(buf), "\\x%02x", id);
    return buf;
}

std::string to_string(ReportFormat format) {
    return format == ReportFormat::csv ? "csv" : "html";
}

ReportFormat parse_report_format(const std::string& text) {
    if (text == "csv") {
        return ReportFormat::csv;
    }
    if (text == "html") {
        return ReportFormat::html;
    }
    throw ConfigError("unknown report format '" + text + "' (expected csv or html)");
}

namespace {

constexpr int kScoreDecimals = 6;

std::string csv_field(const std::string& s) {
    const bool quote = s.find_first_of(",\"\n\r") != std::string::npos || s.empty() || s.front() == ' ' ||
                       s.back() == ' ';
    if (!quote) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    out += '"';
    return out;
}

std::string html_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&':
                out += "&amp;";
                break;
            case '<':
                out += "&lt;";
                break;
            case '>':
                out += "&gt;";
                break;
            case '"':
                out += "&quot;";
                break;
            case '\'':
                out += "&#39;";
                break;
            default:
                out += c;
        }
    }
    return out;
}

std::string render_csv(const TokenIFReport& report) {
    std::string out = "token,if_nats,bucket\n";
    for (const auto& t : report.tokens) {
        out += csv_field(t.text) + "," + text::format_fixed(t.score, kScoreDecimals) + "," + to_string(t.bucket) + "\n";
    }
    return out;
}

std::string render_html(const TokenIFReport& report) {
    const auto fixed = [](double v) { return text::format_fixed(v, 4); };
    std::ostringstream out;
    out << "<!DOCTYPE html>\n"
        << "<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n"
        << "<title>Information Flux report</title>\n"
        << "<style>\n"
        << "body { font-family: sans-serif; margin: 2em; max-width: 60em; }\n"
        << ".tokens { font-family: monospace; font-size: 1.1em; line-height: 2em; }\n"
        << ".tokens span { padding: 0.1em 0.05em; white-space: pre; }\n"
        << ".if-low { background: #cfe8ff; }\n"
        << ".if-medium { background: #fff1a8; }\n"
        << ".if-high { background: #ffb3a7; }\n"
        << ".legend span { display: inline-block; padding: 0.2em 0.6em; margin-right: 0.5em; }\n"
        << "table { border-collapse: collapse; }\n"
        << "td, th { padding: 0.2em 0.8em; text-align: left; }\n"
        << "</style>\n</head>\n<body>\n";
    out << "<h1>Information Flux</h1>\n";
    out << "<p>Prompt: <code>" << html_escape(report.prompt) << "</code></p>\n";
    out << "<div class=\"legend\"><span class=\"if-low\">low (IF &lt; " << fixed(report.q33)
        << ")</span><span class=\"if-medium\">medium</span><span class=\"if-high\">high (IF &gt; " << fixed(report.q66)
        << ")</span></div>\n";
    out << "<p class=\"tokens\">";
    for (const auto& t : report.tokens) {
        out << "<span class=\"if-" << to_string(t.bucket) << "\" title=\"IF = " << fixed(t.score) << " nats\">"
            << html_escape(t.text) << "</span>";
    }
    out << "</p>\n";
    out << "<table>\n"
        << "<tr><th>tokens</th><td>" << report.tokens.size() << "</td></tr>\n"
        << "<tr><th>aggregation</th><td>" << to_string(report.aggregation) << "</td></tr>\n"
        << "<tr><th>d_m</th><td>" << report.width << "</td></tr>\n"
        << "<tr><th>mean IF</th><td>" << fixed(report.mean) << "</td></tr>\n"
        << "<tr><th>min IF</th><td>" << fixed(report.min) << "</td></tr>\n"
        << "<tr><th>max IF</th><td>" << fixed(report.max) << "</td></tr>\n"
        << "<tr><th>33rd / 66th percentile</th><td>" << fixed(report.q33) << " / " << fixed(report.q66)
        << "</td></tr>\n";
    if (report.degenerate) {
        out << "<tr><th>note</th><td>all scores equal; buckets are degenerate</td></tr>\n";
    }
    out << "</table>\n</body>\n</html>\n";
    return out.str();
}

}  // namespace

std::string render_report(const TokenIFReport& report, ReportFormat format) {
    if (report.tokens.empty()) {
        throw DataError("render_report: empty report");
    }
    return format == ReportFormat::csv ? render_csv(report) : render_html(report);
}

void write_report(const TokenIFReport& report, ReportFormat format, const std::filesystem::path& path) {
    const std::string body = render_report(report, format);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write report " + path.string());
    }
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    out.flush();
    if (!out) {
        throw IoError("failed writing report " + path.string());
    }
}

std::vector<TokenIF> parse_csv_report(const std::string& csv) {
    std::vector<TokenIF> out;
    std::size_t pos = 0;
    std::size_t line = 0;
    auto fail = [&](const std::string& what) {
        throw DataError("csv report line " + std::to_string(line) + ": " + what);
    };
    while (pos < csv.size()) {
        ++line;
        std::vector<std::string> fields(1);
        bool quoted = false;
        while (pos < csv.size()) {
            const char c = csv[pos++];
            if (quoted) {
                if (c == '"') {
                    if (pos < csv.size() && csv[pos] == '"') {
                        fields.back() += '"';
                        ++pos;
                    } else {
                        quoted = false;
                    }
                } else {
                    fields.back() += c;
                }
            } else if (c == '"') {
                quoted = true;
            } else if (c == ',') {
                fields.emplace_back();
            } else if (c == '\n') {
                break;
            } else {
                fields.back() += c;
            }
        }
        if (quoted) {
            fail("unterminated quote");
        }
        if (fields.size() != 3) {
            fail("expected 3 columns, got " + std::to_string(fields.size()));
        }
        if (line == 1) {
            if (fields[0] != "token" || fields[1] != "if_nats" || fields[2] != "bucket") {
                fail("unexpected header");
            }
            continue;
        }
        TokenIF t;
        t.text = fields[0];
        t.score = text::parse_double(fields[1], "if_nats");
        t.bucket = parse_if_bucket(fields[2]);
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace infosteer
