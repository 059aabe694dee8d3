//! Writes a Gaussian-cluster dataset directory for trying the CLI offline.
//!
//! cargo run -p visual-rag --example synthetic_dataset -- /tmp/toy

use std::path::PathBuf;

use visual_rag::synthetic::{gaussian_clusters, ClusterSpec};

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args_os()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| "toy-dataset".into());
    let ds = gaussian_clusters(&ClusterSpec {
        name: "toy".into(),
        demo_count: 120,
        ..ClusterSpec::default()
    });
    ds.save(&out)?;
    println!(
        "wrote {} ({} demo, {} test, {} classes)",
        out.display(),
        ds.demo.len(),
        ds.test.len(),
        ds.info.class_names.len()
    );
    Ok(())
}
