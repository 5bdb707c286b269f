//! Declarative runs: parse a config, drive the same pipeline the `dyncfg`
//! binary uses, then read back and verify the checksummed manifest.
//!
//! cargo run --release --example config_run

use dyncfg::config::parse_config;
use dyncfg::output::{read_manifest, verify_run};

const CONFIG: &str = r#"
seed = 19

[world]
preset = "hard"

[guidance]
candidates = [1, 3, 7.5, 11, 15]

[evaluator.align]
kind = "alignment-oracle"

[evaluator.quality]
kind = "quality-oracle"

[policy.fixed]
kind = "fixed"
scale = 7.5

[policy.adaptive]
kind = "dynamic"
evaluators = ["align", "quality"]

[policy.replay]
kind = "median-of-dynamic"
source = "adaptive"

[experiment]
seeds = 60
reference_draws = 1000
"#;

fn main() -> dyncfg::Result<()> {
    let cfg = parse_config(CONFIG)?;
    println!("canonical config, hash {}:\n{}", &cfg.hash()[..16], cfg.to_text());

    let broken = CONFIG.replace("seeds = 60", "seeds = \"sixty\"\nrepeat = 2");
    if let Err(dyncfg::Error::Config(errors)) = parse_config(&broken) {
        for e in errors {
            println!("rejected: {e}");
        }
    }

    let dir = tempfile_dir();
    let path = dir.join("run.toml");
    std::fs::write(&path, CONFIG).map_err(|e| dyncfg::Error::Io { path: path.clone(), source: e })?;
    let out = dir.join("compare");
    let code = dyncfg::cli::run(["dyncfg", "compare", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--force"]);
    assert_eq!(code, 0);

    let manifest = verify_run(&out)?;
    for (file, sum) in &manifest.outputs {
        println!("{file:<20} {}", &sum[..16]);
    }
    assert_eq!(read_manifest(&out)?.status, "complete");
    print!("{}", std::fs::read_to_string(out.join("table2_analog.csv")).unwrap());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("dyncfg_config_run");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
