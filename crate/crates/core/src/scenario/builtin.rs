//! Scenarios and configuration files shipped inside the binary.

const CONFIGS: &[(&str, &str)] = &[
    ("bootstrap.xml", include_str!("../../configs/bootstrap.xml")),
    ("bootstrap-canonical.xml", include_str!("../../configs/bootstrap-canonical.xml")),
    ("bootstrap-infinity.xml", include_str!("../../configs/bootstrap-infinity.xml")),
    ("bootstrap-quorum-stop.xml", include_str!("../../configs/bootstrap-quorum-stop.xml")),
    ("stonith.xml", include_str!("../../configs/stonith.xml")),
    ("stonith-power.xml", include_str!("../../configs/stonith-power.xml")),
    ("vm01.xml", include_str!("../../configs/vm01.xml")),
    ("vms.xml", include_str!("../../configs/vms.xml")),
    ("ha.cf", include_str!("../../configs/ha.cf")),
    ("drbd.conf", include_str!("../../configs/drbd.conf")),
];

const SCENARIOS: &[(&str, &str)] = &[
    ("failed-server-1", include_str!("../../scenarios/failed-server-1.scn")),
    ("failed-server-2", include_str!("../../scenarios/failed-server-2.scn")),
    ("clean-shutdown", include_str!("../../scenarios/clean-shutdown.scn")),
    ("ssh-power-pull-blocked", include_str!("../../scenarios/ssh-power-pull-blocked.scn")),
    ("split-brain-2pri", include_str!("../../scenarios/split-brain-2pri.scn")),
    ("cold-split-0pri", include_str!("../../scenarios/cold-split-0pri.scn")),
    ("disk-fault", include_str!("../../scenarios/disk-fault.scn")),
    ("literal-infinity", include_str!("../../scenarios/literal-infinity.scn")),
    ("literal-quorum-stop", include_str!("../../scenarios/literal-quorum-stop.scn")),
    ("crash-during-commits", include_str!("../../scenarios/crash-during-commits.scn")),
];

/// Embedded config by file name (any leading directories are ignored).
pub fn config(path: &str) -> Option<&'static str> {
    let name = path.rsplit('/').next().unwrap_or(path);
    CONFIGS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn scenario(name: &str) -> Option<&'static str> {
    let name = name.strip_prefix("builtin:").unwrap_or(name);
    SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn scenario_names() -> impl Iterator<Item = &'static str> {
    SCENARIOS.iter().map(|(n, _)| *n)
}

/// First comment line of a builtin scenario.
pub fn summary(name: &str) -> Option<&'static str> {
    scenario(name)?.lines().next()?.strip_prefix("# ")
}
