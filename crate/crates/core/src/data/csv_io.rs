//! Flat CSV exchange format.
//!
//! Dataset: `group_key,click,conversion,user_feats,item_feats,comb_feats`, with
//! feature cells holding `;`-separated integer ids. Ground-truth sidecar:
//! `propensity,true_conversion,z`, aligned row by row with the dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExposureDataset, GroundTruth, InteractionRecord, Vocab, FIELD_COUNT, FIELD_NAMES};
use crate::{Error, Result};

pub const DATASET_HEADER: [&str; 6] = ["group_key", "click", "conversion", "user_feats", "item_feats", "comb_feats"];
pub const GROUND_TRUTH_HEADER: [&str; 3] = ["propensity", "true_conversion", "z"];

/// What to do with rows that report a conversion without a click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationPolicy {
    #[default]
    Drop,
    Reject,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    /// Declared vocabulary; inferred as `max id + 1` per field when absent.
    pub vocab: Option<Vocab>,
    pub violations: ViolationPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub dataset: ExposureDataset,
    /// Rows dropped under [`ViolationPolicy::Drop`].
    pub dropped: usize,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?)
}

fn check_header(rdr: &mut csv::Reader<std::fs::File>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("header {:?}, expected {:?}", header.iter().collect::<Vec<_>>(), expected),
        });
    }
    Ok(())
}

fn parse_flag(cell: &str, name: &str) -> std::result::Result<bool, String> {
    match cell {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("{name} must be 0 or 1, got `{other}`")),
    }
}

fn parse_ids(cell: &str, name: &str) -> std::result::Result<Vec<u32>, String> {
    if cell.is_empty() {
        return Ok(Vec::new());
    }
    cell.split(';').map(|t| t.parse::<u32>().map_err(|e| format!("{name}: bad id `{t}`: {e}"))).collect()
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<IngestReport> {
    let mut rdr = reader(path)?;
    check_header(&mut rdr, path, &DATASET_HEADER)?;
    let parse_err = |line: u64, message: String| Error::Parse { path: PathBuf::from(path), line, message };

    let mut records = Vec::new();
    let mut dropped = 0;
    let mut max_ids = [0usize; FIELD_COUNT];
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != DATASET_HEADER.len() {
            return Err(parse_err(line, format!("expected {} columns, got {}", DATASET_HEADER.len(), row.len())));
        }
        let group_key = row[0].parse::<u64>().map_err(|e| parse_err(line, format!("group_key: {e}")))?;
        let click = parse_flag(&row[1], "click").map_err(|m| parse_err(line, m))?;
        let conversion = parse_flag(&row[2], "conversion").map_err(|m| parse_err(line, m))?;
        let mut feats: [Vec<u32>; FIELD_COUNT] = Default::default();
        for (f, slot) in feats.iter_mut().enumerate() {
            *slot = parse_ids(&row[3 + f], DATASET_HEADER[3 + f]).map_err(|m| parse_err(line, m))?;
            if let Some(vocab) = &schema.vocab {
                let size = vocab.sizes()[f];
                if let Some(&id) = slot.iter().find(|&&id| id as usize >= size) {
                    return Err(parse_err(
                        line,
                        format!("id {id} out of vocabulary for field `{}` (size {size})", FIELD_NAMES[f]),
                    ));
                }
            }
            for &id in slot.iter() {
                max_ids[f] = max_ids[f].max(id as usize + 1);
            }
        }
        if conversion && !click {
            match schema.violations {
                ViolationPolicy::Drop => {
                    dropped += 1;
                    continue;
                }
                ViolationPolicy::Reject => {
                    return Err(parse_err(line, "conversion=1 with click=0".into()));
                }
            }
        }
        let [user_feats, item_feats, comb_feats] = feats;
        records.push(InteractionRecord { group_key, click, conversion, user_feats, item_feats, comb_feats });
    }
    let vocab = schema.vocab.unwrap_or_else(|| Vocab::from_sizes(max_ids));
    Ok(IngestReport { dataset: ExposureDataset::new(records, vocab)?, dropped })
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(";")
}

pub fn write_dataset_csv(path: &Path, dataset: &ExposureDataset) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(DATASET_HEADER)?;
    for r in dataset.records() {
        w.write_record([
            r.group_key.to_string(),
            u8::from(r.click).to_string(),
            u8::from(r.conversion).to_string(),
            join_ids(&r.user_feats),
            join_ids(&r.item_feats),
            join_ids(&r.comb_feats),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ground_truth_csv(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(GROUND_TRUTH_HEADER)?;
    for i in 0..gt.len() {
        w.write_record([
            format!("{}", gt.propensity[i]),
            u8::from(gt.true_conversion[i]).to_string(),
            format!("{}", gt.confounder[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth_csv(path: &Path) -> Result<GroundTruth> {
    let mut rdr = reader(path)?;
    check_header(&mut rdr, path, &GROUND_TRUTH_HEADER)?;
    let (mut p, mut r, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |message: String| Error::Parse { path: path.to_path_buf(), line, message };
        if row.len() != GROUND_TRUTH_HEADER.len() {
            return Err(err(format!("expected 3 columns, got {}", row.len())));
        }
        p.push(row[0].parse::<f64>().map_err(|e| err(format!("propensity: {e}")))?);
        r.push(parse_flag(&row[1], "true_conversion").map_err(err)?);
        z.push(row[2].parse::<f64>().map_err(|e| err(format!("z: {e}")))?);
    }
    GroundTruth::new(p, r, z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "group_key,click,conversion,user_feats,item_feats,comb_feats\n");
        let report = ingest_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!(report.dataset.len(), 0);
        assert_eq!(report.dropped, 0);
    }

    #[test]
    fn three_rows_parse_field_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let body = "group_key,click,conversion,user_feats,item_feats,comb_feats\n\
                    7,1,1,3,0;2,5\n\
                    7,0,0,3,1,\n\
                    9,1,0,1;4,2,0\n";
        let p = write(dir.path(), "d.csv", body);
        let ds = ingest_csv(&p, &CsvSchema::default()).unwrap().dataset;
        let r = ds.records();
        assert_eq!(r.len(), 3);
        assert_eq!(
            r[0],
            InteractionRecord {
                group_key: 7,
                click: true,
                conversion: true,
                user_feats: vec![3],
                item_feats: vec![0, 2],
                comb_feats: vec![5]
            }
        );
        assert_eq!(r[1].comb_feats, Vec::<u32>::new());
        assert!(!r[1].click && !r[1].conversion);
        assert_eq!(r[2].user_feats, vec![1, 4]);
        assert_eq!(ds.vocab(), Vocab { user: 5, item: 3, comb: 6 });
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "group_key,click,conversion,user_feats,item_feats,comb_feats\n1,1,0,1,1,1\n2,x,0,1,1,1\n";
        let p = write(dir.path(), "d.csv", body);
        match ingest_csv(&p, &CsvSchema::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn violation_policy() {
        let dir = tempfile::tempdir().unwrap();
        let body = "group_key,click,conversion,user_feats,item_feats,comb_feats\n1,0,1,0,0,0\n2,1,1,0,0,0\n";
        let p = write(dir.path(), "d.csv", body);
        let report = ingest_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!((report.dataset.len(), report.dropped), (1, 1));
        let strict = CsvSchema { violations: ViolationPolicy::Reject, ..Default::default() };
        assert!(matches!(ingest_csv(&p, &strict), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn declared_vocab_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let body = "group_key,click,conversion,user_feats,item_feats,comb_feats\n1,1,0,4,0,0\n";
        let p = write(dir.path(), "d.csv", body);
        let schema = CsvSchema { vocab: Some(Vocab { user: 4, item: 1, comb: 1 }), ..Default::default() };
        assert!(matches!(ingest_csv(&p, &schema), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "click,group_key\n");
        assert!(matches!(ingest_csv(&p, &CsvSchema::default()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ground_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gt = GroundTruth::new(vec![0.1, 1.0 / 3.0], vec![true, false], vec![-1.25e-7, 2.0]).unwrap();
        let p = dir.path().join("gt.csv");
        write_ground_truth_csv(&p, &gt).unwrap();
        assert_eq!(read_ground_truth_csv(&p).unwrap(), gt);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("propensity,true_conversion,z\n"));
    }
}
