#pragma once

#include "forkspace/io.hpp"
#include "forkspace/types.hpp"

#include <map>
#include <set>

#include <nlohmann/json_fwd.hpp>

namespace forkspace {

enum class ProfileMode { Enforce, Audit };
enum class AccessKind { Syscall, File, Device };
enum class Actor { Human, Agent };

std::string_view to_string(ProfileMode m);
std::string_view to_string(AccessKind k);

/// Allowlist attached to a branch at fork time.
struct SecurityProfile {
    std::set<std::string> apps;
    std::set<std::string> syscalls;
    /// Patterns: trailing '/' is a prefix, '*' matches exactly one path level.
    std::set<std::string> paths;
    std::set<std::string> devices;
    ProfileMode mode = ProfileMode::Enforce;
    /// OS-configuration class; never auto-composed under Enforce.
    bool privileged = false;

    friend bool operator==(const SecurityProfile&, const SecurityProfile&) = default;
};

void to_json(nlohmann::json& j, const SecurityProfile& p);
void from_json(const nlohmann::json& j, SecurityProfile& p);

std::string profile_to_json(const SecurityProfile& p);
SecurityProfile profile_from_json(const std::string& text);

struct AccessEvent {
    BranchId branch = 0;
    AccessKind kind = AccessKind::Syscall;
    std::string target;
    std::uint64_t timestamp = 0;
    Actor actor = Actor::Human;

    friend bool operator==(const AccessEvent&, const AccessEvent&) = default;
};

std::string to_json_line(const AccessEvent& e);
AccessEvent access_event_from_json_line(const std::string& line);
std::vector<AccessEvent> load_trace(const std::filesystem::path& file);
void save_trace(const std::filesystem::path& file, const std::vector<AccessEvent>& trace);

bool path_matches(std::string_view pattern, std::string_view path);

/// Exactly the distinct resources touched by a human-operated trace.
SecurityProfile record_profile(const std::vector<AccessEvent>& trace, const std::string& app);

class ProfileRegistry {
  public:
    void add(SecurityProfile profile);
    const SecurityProfile& get(const std::string& app) const;
    bool contains(const std::string& app) const { return profiles_.count(app) != 0; }
    std::vector<std::string> apps() const;

  private:
    std::map<std::string, SecurityProfile> profiles_;
};

/// Field-wise union of the registered profiles for `apps`.
SecurityProfile compose_profile(const std::vector<std::string>& apps, const ProfileRegistry& registry,
                                ProfileMode mode = ProfileMode::Enforce);

enum class Decision { Allow, Deny };

std::string_view to_string(Decision d);

bool profile_allows(const SecurityProfile& profile, const AccessEvent& event);

/// Enforce mode: denied events are blocked and logged. Audit mode: nothing is
/// blocked and every event is logged.
Decision enforce(const SecurityProfile& profile, const AccessEvent& event, AuditLog* log = nullptr);

/// Synthetic resource universe at desktop scale.
struct ResourceUniverse {
    std::vector<std::string> syscalls;
    std::vector<std::string> files;
    std::vector<std::string> devices;
};

ResourceUniverse make_universe(std::size_t syscalls = 400, std::size_t files = 100000, std::size_t devices = 32);

/// Human trace touching exactly `syscall_count` distinct syscalls, `file_count`
/// files and `device_count` devices, with repeats.
std::vector<AccessEvent> synthetic_human_trace(const ResourceUniverse& u, std::size_t syscall_count,
                                               std::size_t file_count, std::size_t device_count,
                                               std::uint64_t seed);

struct ProfileCoverage {
    std::size_t syscalls = 0;
    std::size_t files = 0;
    std::size_t devices = 0;
    double syscall_ratio = 0.0;
    double file_ratio = 0.0;
    double device_ratio = 0.0;
};

ProfileCoverage coverage(const SecurityProfile& p, const ResourceUniverse& u);

} // namespace forkspace
