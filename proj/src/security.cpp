#include "forkspace/security.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

namespace forkspace {

std::string_view to_string(ProfileMode m) { return m == ProfileMode::Enforce ? "enforce" : "audit"; }

std::string_view to_string(AccessKind k) {
    switch (k) {
    case AccessKind::Syscall: return "syscall";
    case AccessKind::File: return "file";
    case AccessKind::Device: return "device";
    }
    return "?";
}

std::string_view to_string(Decision d) { return d == Decision::Allow ? "allow" : "deny"; }

namespace {

ProfileMode mode_from(const std::string& s) {
    if (s == "enforce") return ProfileMode::Enforce;
    if (s == "audit") return ProfileMode::Audit;
    throw Error(ErrorCode::InvalidArgument, "unknown profile mode " + s);
}

AccessKind kind_from(const std::string& s) {
    if (s == "syscall") return AccessKind::Syscall;
    if (s == "file") return AccessKind::File;
    if (s == "device") return AccessKind::Device;
    throw Error(ErrorCode::InvalidArgument, "unknown access kind " + s);
}

} // namespace

void to_json(nlohmann::json& j, const SecurityProfile& p) {
    j = nlohmann::json{{"apps", p.apps},
                       {"syscalls", p.syscalls},
                       {"paths", p.paths},
                       {"devices", p.devices},
                       {"mode", std::string(to_string(p.mode))},
                       {"privileged", p.privileged}};
}

void from_json(const nlohmann::json& j, SecurityProfile& p) {
    p = {};
    p.apps = j.value("apps", std::set<std::string>{});
    p.syscalls = j.value("syscalls", std::set<std::string>{});
    p.paths = j.value("paths", std::set<std::string>{});
    p.devices = j.value("devices", std::set<std::string>{});
    p.mode = mode_from(j.value("mode", std::string("enforce")));
    p.privileged = j.value("privileged", false);
}

std::string profile_to_json(const SecurityProfile& p) { return nlohmann::json(p).dump(2); }

SecurityProfile profile_from_json(const std::string& text) {
    return nlohmann::json::parse(text).get<SecurityProfile>();
}

std::string to_json_line(const AccessEvent& e) {
    return nlohmann::json{{"branch", e.branch},
                          {"kind", std::string(to_string(e.kind))},
                          {"target", e.target},
                          {"ts", e.timestamp},
                          {"actor", e.actor == Actor::Human ? "human" : "agent"}}
        .dump();
}

AccessEvent access_event_from_json_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    AccessEvent e;
    e.branch = j.value("branch", BranchId{0});
    e.kind = kind_from(j.at("kind").get<std::string>());
    e.target = j.at("target").get<std::string>();
    e.timestamp = j.value("ts", std::uint64_t{0});
    const auto actor = j.value("actor", std::string("human"));
    if (actor != "human" && actor != "agent") throw Error(ErrorCode::InvalidArgument, "unknown actor " + actor);
    e.actor = actor == "human" ? Actor::Human : Actor::Agent;
    return e;
}

std::vector<AccessEvent> load_trace(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(ErrorCode::NotFound, "cannot open trace " + file.string());
    std::vector<AccessEvent> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(access_event_from_json_line(line));
    }
    return out;
}

void save_trace(const std::filesystem::path& file, const std::vector<AccessEvent>& trace) {
    std::ofstream out(file);
    if (!out) throw Error(ErrorCode::StorageFailure, "cannot write trace " + file.string());
    for (const auto& e : trace) out << to_json_line(e) << '\n';
}

bool path_matches(std::string_view pattern, std::string_view path) {
    if (!pattern.empty() && pattern.back() == '/') return path.substr(0, pattern.size()) == pattern;
    std::size_t pi = 0, xi = 0;
    while (pi <= pattern.size() && xi <= path.size()) {
        const auto pe = std::min(pattern.find('/', pi), pattern.size());
        const auto xe = std::min(path.find('/', xi), path.size());
        const auto pseg = pattern.substr(pi, pe - pi);
        const auto xseg = path.substr(xi, xe - xi);
        if (pseg != "*" && pseg != xseg) return false;
        const bool pend = pe == pattern.size();
        const bool xend = xe == path.size();
        if (pend || xend) return pend && xend;
        pi = pe + 1;
        xi = xe + 1;
    }
    return false;
}

SecurityProfile record_profile(const std::vector<AccessEvent>& trace, const std::string& app) {
    SecurityProfile p;
    p.apps.insert(app);
    for (const auto& e : trace) {
        if (e.actor != Actor::Human) {
            throw Error(ErrorCode::PolicyRejected, "profiles are recorded from human-operated sessions only");
        }
        switch (e.kind) {
        case AccessKind::Syscall: p.syscalls.insert(e.target); break;
        case AccessKind::File: p.paths.insert(e.target); break;
        case AccessKind::Device: p.devices.insert(e.target); break;
        }
    }
    return p;
}

void ProfileRegistry::add(SecurityProfile profile) {
    if (profile.apps.size() != 1) throw Error(ErrorCode::InvalidArgument, "registered profiles name one app");
    const auto app = *profile.apps.begin();
    profiles_[app] = std::move(profile);
}

const SecurityProfile& ProfileRegistry::get(const std::string& app) const {
    auto it = profiles_.find(app);
    if (it == profiles_.end()) throw Error(ErrorCode::NotFound, "unknown app " + app);
    return it->second;
}

std::vector<std::string> ProfileRegistry::apps() const {
    std::vector<std::string> out;
    for (const auto& [app, _] : profiles_) out.push_back(app);
    return out;
}

SecurityProfile compose_profile(const std::vector<std::string>& apps, const ProfileRegistry& registry,
                                ProfileMode mode) {
    SecurityProfile out;
    out.mode = mode;
    for (const auto& app : apps) {
        const auto& p = registry.get(app);
        if (p.privileged && mode == ProfileMode::Enforce) {
            throw Error(ErrorCode::PolicyRejected, "privileged profile " + app + " needs a separate policy");
        }
        out.privileged = out.privileged || p.privileged;
        out.apps.insert(p.apps.begin(), p.apps.end());
        out.syscalls.insert(p.syscalls.begin(), p.syscalls.end());
        out.paths.insert(p.paths.begin(), p.paths.end());
        out.devices.insert(p.devices.begin(), p.devices.end());
    }
    return out;
}

namespace {

bool is_wildcard(const std::string& pattern) {
    return (!pattern.empty() && pattern.back() == '/') || pattern.find('*') != std::string::npos;
}

} // namespace

bool profile_allows(const SecurityProfile& profile, const AccessEvent& event) {
    switch (event.kind) {
    case AccessKind::Syscall: return profile.syscalls.count(event.target) != 0;
    case AccessKind::Device: return profile.devices.count(event.target) != 0;
    case AccessKind::File:
        if (profile.paths.count(event.target)) return true;
        return std::any_of(profile.paths.begin(), profile.paths.end(),
                           [&](const std::string& pat) { return is_wildcard(pat) && path_matches(pat, event.target); });
    }
    return false;
}

Decision enforce(const SecurityProfile& profile, const AccessEvent& event, AuditLog* log) {
    const bool allowed = profile_allows(profile, event);
    const bool audit = profile.mode == ProfileMode::Audit;
    if (log && (audit || !allowed)) {
        nlohmann::json j{{"type", "access"},
                         {"branch", event.branch},
                         {"kind", std::string(to_string(event.kind))},
                         {"target", event.target},
                         {"ts", event.timestamp},
                         {"mode", std::string(to_string(profile.mode))},
                         {"allowed", allowed}};
        log->append(j.dump());
    }
    return (allowed || audit) ? Decision::Allow : Decision::Deny;
}

ResourceUniverse make_universe(std::size_t syscalls, std::size_t files, std::size_t devices) {
    ResourceUniverse u;
    char buf[64];
    for (std::size_t i = 0; i < syscalls; ++i) {
        std::snprintf(buf, sizeof buf, "sys_%03zu", i);
        u.syscalls.emplace_back(buf);
    }
    for (std::size_t i = 0; i < files; ++i) {
        std::snprintf(buf, sizeof buf, "/usr/share/d%03zu/f%06zu", i % 500, i);
        u.files.emplace_back(buf);
    }
    for (std::size_t i = 0; i < devices; ++i) {
        std::snprintf(buf, sizeof buf, "/dev/dev%02zu", i);
        u.devices.emplace_back(buf);
    }
    return u;
}

namespace {

std::vector<std::string> pick(const std::vector<std::string>& from, std::size_t count, std::mt19937_64& rng) {
    if (count > from.size()) throw Error(ErrorCode::OutOfRange, "trace asks for more resources than exist");
    std::vector<std::string> out;
    out.reserve(count);
    std::sample(from.begin(), from.end(), std::back_inserter(out), count, rng);
    return out;
}

} // namespace

std::vector<AccessEvent> synthetic_human_trace(const ResourceUniverse& u, std::size_t syscall_count,
                                               std::size_t file_count, std::size_t device_count,
                                               std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto sys = pick(u.syscalls, syscall_count, rng);
    const auto files = pick(u.files, file_count, rng);
    const auto devs = pick(u.devices, device_count, rng);
    std::vector<AccessEvent> out;
    std::uint64_t ts = 0;
    auto emit = [&](AccessKind k, const std::vector<std::string>& targets) {
        for (const auto& t : targets) {
            out.push_back({0, k, t, ts++, Actor::Human});
        }
        // Repeats: a real session touches hot resources many times.
        if (targets.empty()) return;
        std::uniform_int_distribution<std::size_t> d(0, targets.size() - 1);
        for (std::size_t i = 0; i < targets.size(); ++i) out.push_back({0, k, targets[d(rng)], ts++, Actor::Human});
    };
    emit(AccessKind::Syscall, sys);
    emit(AccessKind::File, files);
    emit(AccessKind::Device, devs);
    std::shuffle(out.begin(), out.end(), rng);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].timestamp = i;
    return out;
}

ProfileCoverage coverage(const SecurityProfile& p, const ResourceUniverse& u) {
    ProfileCoverage c;
    for (const auto& s : u.syscalls) c.syscalls += p.syscalls.count(s);
    std::vector<std::string> wild;
    for (const auto& pat : p.paths) {
        if (is_wildcard(pat)) wild.push_back(pat);
    }
    for (const auto& f : u.files) {
        const bool hit = p.paths.count(f) ||
                         std::any_of(wild.begin(), wild.end(), [&](const std::string& w) { return path_matches(w, f); });
        c.files += hit ? 1 : 0;
    }
    for (const auto& d : u.devices) c.devices += p.devices.count(d);
    auto ratio = [](std::size_t n, std::size_t d) { return d ? static_cast<double>(n) / static_cast<double>(d) : 0.0; };
    c.syscall_ratio = ratio(c.syscalls, u.syscalls.size());
    c.file_ratio = ratio(c.files, u.files.size());
    c.device_ratio = ratio(c.devices, u.devices.size());
    return c;
}

} // namespace forkspace
