use std::collections::HashSet;

use super::labels::{class_index, LabelVector, CLASS_NAMES};
use super::{DatasetError, Split};
use crate::nn::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_id: String,
    pub patient_id: String,
    pub labels: LabelVector,
    /// Unassigned until [`split_by_patient`](super::split_by_patient) runs,
    /// unless the metadata carries a `split` column.
    pub split: Option<Split>,
}

impl SampleRecord {
    pub fn findings(&self) -> String {
        CLASS_NAMES
            .iter()
            .zip(self.labels)
            .filter(|(_, on)| *on == 1)
            .map(|(name, _)| *name)
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Parse `image_id,patient_id,findings[,split]` CSV.
///
/// Findings are `|`-separated class names; an empty field is the all-zero
/// label (no finding).
pub fn parse_metadata(bytes: &[u8]) -> Result<Vec<SampleRecord>, DatasetError> {
    let text = std::str::from_utf8(bytes).map_err(|e| DatasetError::Parse {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "not valid UTF-8".into(),
    })?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r')).enumerate();

    let header = lines
        .next()
        .map(|(_, h)| h.split(',').map(str::trim).collect::<Vec<_>>())
        .unwrap_or_default();
    let with_split = match header.as_slice() {
        ["image_id", "patient_id", "findings"] => false,
        ["image_id", "patient_id", "findings", "split"] => true,
        _ => {
            return Err(DatasetError::Parse {
                line: 1,
                message: "expected header image_id,patient_id,findings[,split]".into(),
            })
        }
    };

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = if with_split { 4 } else { 3 };
        if fields.len() != expected {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let (image_id, patient_id) = (fields[0], fields[1]);
        if image_id.is_empty() || patient_id.is_empty() {
            return Err(DatasetError::Parse {
                line: line_no,
                message: "empty image_id or patient_id".into(),
            });
        }
        let mut labels = [0u8; NUM_CLASSES];
        for class in fields[2].split('|').map(str::trim).filter(|c| !c.is_empty()) {
            if class.eq_ignore_ascii_case("No Finding") {
                continue;
            }
            let k = class_index(class).ok_or_else(|| DatasetError::Vocabulary {
                line: line_no,
                class: class.to_string(),
            })?;
            labels[k] = 1;
        }
        let split = if with_split {
            Some(fields[3].parse().map_err(|message| DatasetError::Parse {
                line: line_no,
                message,
            })?)
        } else {
            None
        };
        if !seen.insert(image_id.to_string()) {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("duplicate image_id {image_id}"),
            });
        }
        records.push(SampleRecord {
            image_id: image_id.to_string(),
            patient_id: patient_id.to_string(),
            labels,
            split,
        });
    }
    Ok(records)
}

/// Inverse of [`parse_metadata`]; includes the `split` column when every
/// record has one.
pub fn render_metadata(records: &[SampleRecord]) -> String {
    let with_split = !records.is_empty() && records.iter().all(|r| r.split.is_some());
    let mut out = String::from("image_id,patient_id,findings");
    out.push_str(if with_split { ",split\n" } else { "\n" });
    for r in records {
        out.push_str(&format!("{},{},{}", r.image_id, r.patient_id, r.findings()));
        if let (true, Some(s)) = (with_split, r.split) {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "image_id,patient_id,findings\n";

    fn parse(body: &str) -> Result<Vec<SampleRecord>, DatasetError> {
        parse_metadata(format!("{HEADER}{body}").as_bytes())
    }

    #[test]
    fn multi_hot_encoding() {
        let r = parse("img1.pgm,p1,Atelectasis|Effusion\n").unwrap();
        let mut expected = [0u8; 14];
        expected[0] = 1;
        expected[4] = 1;
        assert_eq!(r[0].labels, expected);
        assert_eq!(r[0].split, None);
    }

    #[test]
    fn empty_findings_is_all_zero() {
        let r = parse("img2.pgm,p2,\r\nimg3.pgm,p3,No Finding\r\n").unwrap();
        assert_eq!(r[0].labels, [0; 14]);
        assert_eq!(r[1].labels, [0; 14]);
    }

    #[test]
    fn unknown_class_is_named() {
        match parse("img1.pgm,p1,Effusion\nimg3.pgm,p3,Tumor\n") {
            Err(DatasetError::Vocabulary { line, class }) => {
                assert_eq!(line, 3);
                assert_eq!(class, "Tumor");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate_rows() {
        assert!(matches!(parse("a,b\n"), Err(DatasetError::Parse { line: 2, .. })));
        assert!(matches!(
            parse("a,p,\na,q,\n"),
            Err(DatasetError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_metadata(b"id,patient\n"),
            Err(DatasetError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn render_round_trip_with_split() {
        let text = "image_id,patient_id,findings,split\na.pgm,p1,Edema|Mass,train\nb.pgm,p2,,test\n";
        let records = parse_metadata(text.as_bytes()).unwrap();
        assert_eq!(records[1].split, Some(Split::Test));
        assert_eq!(render_metadata(&records), text);
    }
}
