//! Line-delimited prediction records, so external models can be scored.
//!
//! UTF-8 text, one record per line, fields separated by a single tab. Blank
//! lines and lines starting with `#` are ignored. Integers are decimal;
//! floats are written in shortest round-trip form. Boxes are
//! `cx cy w h` in normalized image coordinates.
//!
//! ```text
//! REL image query subj_label subj_score scx scy sw sh predicate rel_score obj_label obj_score ocx ocy ow oh score
//! HOI image query human_score hcx hcy hw hh action act_score obj_label obj_score ocx ocy ow oh score
//! ```
//!
//! `REL` lines have 18 fields and `HOI` lines 17, counting the tag.
//! `score` is the ranking confidence, normally the product of the three
//! component scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::recall::{sort_candidates, Candidate};
use super::role::HoiDetection;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const HEADER: &str = "# scenehoi predictions v1";

/// Parsed prediction records. Relation candidates are ranked per image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Records {
    pub rel: BTreeMap<u64, Vec<Candidate>>,
    pub hoi: Vec<HoiDetection>,
}

fn push_box(s: &mut String, b: &BBox) {
    for v in b.to_array() {
        write!(s, "\t{v}").expect("string write");
    }
}

pub fn rel_record(image: u64, c: &Candidate) -> String {
    let mut s = format!("REL\t{image}\t{}\t{}\t{}", c.query, c.subj_label, c.subj_score);
    push_box(&mut s, &c.subj_box);
    write!(s, "\t{}\t{}\t{}\t{}", c.predicate, c.rel_score, c.obj_label, c.obj_score).expect("string write");
    push_box(&mut s, &c.obj_box);
    write!(s, "\t{}", c.score).expect("string write");
    s
}

pub fn hoi_record(d: &HoiDetection) -> String {
    let mut s = format!("HOI\t{}\t{}\t{}", d.image, d.query, d.human_score);
    push_box(&mut s, &d.human_box);
    write!(s, "\t{}\t{}\t{}\t{}", d.action, d.act_score, d.obj_label, d.obj_score).expect("string write");
    push_box(&mut s, &d.obj_box);
    write!(s, "\t{}", d.score).expect("string write");
    s
}

/// Full record document with header line.
pub fn records_to_string(records: &Records) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for (image, cands) in &records.rel {
        for c in cands {
            out.push_str(&rel_record(*image, c));
            out.push('\n');
        }
    }
    for d in &records.hoi {
        out.push_str(&hoi_record(d));
        out.push('\n');
    }
    out
}

struct Fields<'a> {
    parts: std::str::Split<'a, char>,
    line: usize,
}

impl Fields<'_> {
    fn next(&mut self) -> Result<&str> {
        self.parts.next().ok_or_else(|| Error::Parse { line: self.line, message: "too few fields".into() })
    }

    fn uint(&mut self) -> Result<u64> {
        let line = self.line;
        let f = self.next()?;
        f.parse().map_err(|_| Error::Parse { line, message: format!("`{f}` is not an unsigned integer") })
    }

    fn float(&mut self) -> Result<f64> {
        let line = self.line;
        let f = self.next()?;
        f.parse().map_err(|_| Error::Parse { line, message: format!("`{f}` is not a number") })
    }

    fn bbox(&mut self) -> Result<BBox> {
        Ok(BBox::unchecked(self.float()?, self.float()?, self.float()?, self.float()?))
    }

    fn finish(mut self) -> Result<()> {
        match self.parts.next() {
            None => Ok(()),
            Some(_) => Err(Error::Parse { line: self.line, message: "too many fields".into() }),
        }
    }
}

pub fn parse_records(text: &str) -> Result<Records> {
    let mut out = Records::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let mut f = Fields { parts: raw.split('\t'), line };
        match f.next()? {
            "REL" => {
                let image = f.uint()?;
                let c = Candidate {
                    query: f.uint()? as usize,
                    subj_label: f.uint()? as usize,
                    subj_score: f.float()?,
                    subj_box: f.bbox()?,
                    predicate: f.uint()? as usize,
                    rel_score: f.float()?,
                    obj_label: f.uint()? as usize,
                    obj_score: f.float()?,
                    obj_box: f.bbox()?,
                    score: f.float()?,
                };
                f.finish()?;
                out.rel.entry(image).or_default().push(c);
            }
            "HOI" => {
                let d = HoiDetection {
                    image: f.uint()?,
                    query: f.uint()? as usize,
                    human_score: f.float()?,
                    human_box: f.bbox()?,
                    action: f.uint()? as usize,
                    act_score: f.float()?,
                    obj_label: f.uint()? as usize,
                    obj_score: f.float()?,
                    obj_box: f.bbox()?,
                    score: f.float()?,
                };
                f.finish()?;
                out.hoi.push(d);
            }
            tag => return Err(Error::Parse { line, message: format!("unknown record tag `{tag}`") }),
        }
    }
    for cands in out.rel.values_mut() {
        sort_candidates(cands);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(query: usize, score: f64) -> Candidate {
        Candidate {
            query,
            subj_box: BBox::new(0.25, 0.5, 0.1, 0.3).unwrap(),
            subj_label: 2,
            subj_score: 0.1 + 0.2,
            predicate: 4,
            rel_score: 1.0 / 3.0,
            obj_box: BBox::new(0.75, 0.5, 0.2, 0.2).unwrap(),
            obj_label: 0,
            obj_score: 1e-17,
            score,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let rel = BTreeMap::from([(7, vec![cand(0, 0.9), cand(3, 0.25)]), (2, vec![cand(1, 0.5)])]);
        let hoi = vec![HoiDetection {
            image: 7,
            query: 5,
            human_box: BBox::new(0.3, 0.3, 0.2, 0.2).unwrap(),
            human_score: 0.875,
            action: 1,
            act_score: 0.2,
            obj_box: BBox::new(0.6, 0.6, 0.1, 0.1).unwrap(),
            obj_label: 3,
            obj_score: 0.6,
            score: 0.105,
        }];
        let r = Records { rel, hoi };
        let text = records_to_string(&r);
        assert_eq!(parse_records(&text).unwrap(), r);
        assert!(text.lines().nth(1).unwrap().split('\t').count() == 18);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_records("XYZ\t1").is_err());
        assert!(parse_records("REL\t1\t2").is_err());
        let line = rel_record(1, &cand(0, 0.5));
        assert!(parse_records(&format!("{line}\textra")).is_err());
        assert!(parse_records(&line.replace("REL\t1", "REL\t-1")).is_err());
        assert_eq!(parse_records("# comment\n\n").unwrap(), Records::default());
    }
}
