use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::ImagingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitReport {
    /// Files copied per split, indexed by [`Split::index`].
    pub copied: [usize; 3],
    /// `(image id, split, reason)` for every file that could not be copied.
    pub failures: Vec<(String, Split, String)>,
}

impl SplitReport {
    pub fn failures_in(&self, split: Split) -> usize {
        self.failures.iter().filter(|(_, s, _)| *s == split).count()
    }

    /// `split,count,failures` with one row per split.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,count,failures\n");
        for s in Split::ALL {
            out.push_str(&format!("{},{},{}\n", s, self.copied[s.index()], self.failures_in(s)));
        }
        out
    }
}

/// Copy each manifest image into `<out>/<split>/<image id>`.
///
/// Missing or unreadable sources are recorded in the report and skipped;
/// only failure to create the split directories aborts.
pub fn organize_splits(
    source_dir: &Path,
    manifest: &[(String, Split)],
    out_dir: &Path,
) -> Result<SplitReport, ImagingError> {
    for s in Split::ALL {
        let dir = out_dir.join(s.as_str());
        fs::create_dir_all(&dir).map_err(|source| ImagingError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let mut report = SplitReport::default();
    for (id, split) in manifest {
        let name = Path::new(id);
        if name.components().count() != 1 {
            report
                .failures
                .push((id.clone(), *split, "image id must be a plain file name".into()));
            continue;
        }
        let dest = out_dir.join(split.as_str()).join(name);
        match fs::copy(source_dir.join(name), &dest) {
            Ok(_) => report.copied[split.index()] += 1,
            Err(e) => report.failures.push((id.clone(), *split, e.to_string())),
        }
    }
    Ok(report)
}
