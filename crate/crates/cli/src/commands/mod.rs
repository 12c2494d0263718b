mod evaluate;
mod fit;
mod simulate;
mod template;

pub use evaluate::evaluate;
pub use fit::fit;
pub use simulate::simulate;
pub use template::build_template;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tica_core::template::Template;

use crate::error::{CliError, Result};
use crate::manifest::{write_artifact, Manifest};
use crate::run::TEMPLATE_FILES;

fn csv_bytes<R: Serialize>(path: &str, rows: &[R]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(|source| CliError::Csv {
            path: path.into(),
            source,
        })?;
    }
    writer.into_inner().map_err(|e| CliError::Io {
        path: path.into(),
        source: e.into_error(),
    })
}

/// Writes a CSV table with a header row, even when empty.
fn write_csv<R: Serialize>(root: &Path, rel: &str, header: &[&str], rows: &[R]) -> Result<(String, String)> {
    let bytes = if rows.is_empty() {
        format!("{}\n", header.join(",")).into_bytes()
    } else {
        csv_bytes(rel, rows)?
    };
    write_artifact(root, rel, &bytes)
}

fn read_csv<R: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<Vec<R>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|source| CliError::Csv {
            path: path.into(),
            source,
        })
}

fn save_template_artifacts(root: &Path, dir: &str, template: &Template, manifest: &mut Manifest) -> Result<()> {
    tica_core::template::save_template(template, root.join(dir))?;
    for name in TEMPLATE_FILES {
        manifest.record(root, &format!("{dir}/{name}"))?;
    }
    Ok(())
}

fn load_template_verified(root: &Path, dir: &str, manifest: &Manifest) -> Result<Template> {
    for name in TEMPLATE_FILES {
        manifest.verify(root, &format!("{dir}/{name}"))?;
    }
    Ok(tica_core::template::load_template(root.join(dir))?)
}
