//! Scenario builders shared by the benchmarks in `benches/`.

use qnet_core::{Scenario, ScenarioConfig};

/// The default 5-node chain carrying `flows` Poisson flows at `load`, run
/// for `duration_s` under the given congestion-control mode.
pub fn chain_scenario(flows: u32, load: f64, cc: &str, duration_s: f64) -> Scenario {
    let text = format!(
        "[run]\nduration_s = {duration_s}\n\
         [transport]\ncc = \"{cc}\"\n\
         [[flows]]\ncount = {flows}\ndemand = {{ kind = \"poisson\", load = {load} }}\n"
    );
    ScenarioConfig::from_toml_str(&text)
        .and_then(|c| c.resolve())
        .expect("benchmark scenario is valid")
}
