use std::path::Path;

use super::{ImageRecord, Manifest, Split};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["path", "label", "split", "sha256"];

impl Manifest {
    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let io = |e: csv::Error| Error::Manifest {
            line: 0,
            reason: e.to_string(),
        };
        w.write_record(MANIFEST_HEADER).map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.image_path.as_str(),
                r.label.as_str(),
                r.split.as_str(),
                r.content_hash.as_str(),
            ])
            .map_err(io)?;
        }
        w.into_inner().map_err(|e| Error::Manifest {
            line: 0,
            reason: e.to_string(),
        })
    }

    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Manifest {
            line: 1,
            reason: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Manifest {
                line: 1,
                reason: format!("expected header {:?}, found {:?}", MANIFEST_HEADER.join(","), header),
            });
        }
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Manifest {
                line,
                reason: e.to_string(),
            })?;
            let bad = |reason: String| Error::Manifest { line, reason };
            let field = |k: usize| row.get(k).ok_or_else(|| bad(format!("missing column {}", MANIFEST_HEADER[k])));
            let content_hash = field(3)?.to_string();
            if content_hash.len() != 64 || !content_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(bad(format!("invalid sha256 {content_hash:?}")));
            }
            records.push(ImageRecord {
                image_path: field(0)?.to_string(),
                label: field(1)?.parse().map_err(bad)?,
                split: field(2)?.parse::<Split>().map_err(bad)?,
                dims: None,
                content_hash,
            });
        }
        Ok(Manifest {
            records,
            seed: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_bytes()?).map_err(|e| Error::io(path, e))
    }
}
