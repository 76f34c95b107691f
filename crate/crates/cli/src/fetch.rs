use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clbench::data::{sha256_hex, MNIST_FILES};
use flate2::read::GzDecoder;

pub const DEFAULT_BASE_URL: &str = "https://storage.googleapis.com/cvdf-datasets/mnist/";

/// Downloads `<name>.gz` for each MNIST file, decompresses it and checks the
/// digest before writing. Files already present with the right digest are
/// left alone.
pub fn fetch_all(base_url: &str, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in MNIST_FILES {
        let dest = dir.join(f.name);
        if let Ok(existing) = std::fs::read(&dest) {
            if sha256_hex(&existing) == f.sha256 {
                log::info!("{} already present", f.name);
                continue;
            }
        }
        let url = format!("{}/{}.gz", base_url.trim_end_matches('/'), f.name);
        log::info!("downloading {url}");
        let resp = ureq::get(&url).call().with_context(|| format!("fetching {url}"))?;
        let mut gz = Vec::new();
        resp.into_reader().read_to_end(&mut gz)?;
        let mut raw = Vec::with_capacity(f.size as usize);
        GzDecoder::new(&gz[..])
            .read_to_end(&mut raw)
            .with_context(|| format!("decompressing {url}"))?;
        let got = sha256_hex(&raw);
        if got != f.sha256 {
            bail!("{}: sha256 {got} does not match expected {}", f.name, f.sha256);
        }
        std::fs::write(&dest, &raw)?;
    }
    println!("MNIST files verified in {}", dir.display());
    Ok(())
}
