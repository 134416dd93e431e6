//! KITTI label and calibration text formats.
//!
//! Label lines carry, in order: type, truncated, occluded, alpha, bbox
//! (left, top, right, bottom), dimensions (h, w, l), location (x, y, z),
//! rotation_y, and optionally a score.

use crate::error::{Error, Result};
use crate::scene::{CalibMatrix, ObjectClass, SceneAnnotation};

const FIELD_NAMES: [&str; 15] = [
    "type",
    "truncated",
    "occluded",
    "alpha",
    "bbox_left",
    "bbox_top",
    "bbox_right",
    "bbox_bottom",
    "height",
    "width",
    "length",
    "x",
    "y",
    "z",
    "rotation_y",
];

fn number(fields: &[&str], index: usize) -> Result<f64> {
    fields[index].parse::<f64>().map_err(|_| Error::LabelField {
        index,
        name: FIELD_NAMES[index],
        value: fields[index].to_string(),
    })
}

pub fn parse_kitti_label(line: &str) -> Result<SceneAnnotation> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 15 {
        return Err(Error::LabelArity { got: fields.len() });
    }
    let n = |i| number(&fields, i);
    let occlusion = n(2)?;
    if occlusion.fract() != 0.0 {
        return Err(Error::LabelField {
            index: 2,
            name: FIELD_NAMES[2],
            value: fields[2].to_string(),
        });
    }
    Ok(SceneAnnotation {
        class: ObjectClass::from_kitti(fields[0]),
        truncation: n(1)?,
        occlusion: occlusion as i32,
        alpha: n(3)?,
        bbox2d: [n(4)?, n(5)?, n(6)?, n(7)?],
        dimensions: [n(8)?, n(9)?, n(10)?],
        location: [n(11)?, n(12)?, n(13)?],
        yaw: n(14)?,
    })
}

/// Parses every non-empty line of a label file.
pub fn parse_kitti_labels(text: &str) -> Result<Vec<SceneAnnotation>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_kitti_label)
        .collect()
}

/// One label line; a score is appended when given (result format).
pub fn format_kitti_label(a: &SceneAnnotation, score: Option<f64>) -> String {
    let mut s = format!(
        "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
        a.class.kitti_name(),
        a.truncation,
        a.occlusion,
        a.alpha,
        a.bbox2d[0],
        a.bbox2d[1],
        a.bbox2d[2],
        a.bbox2d[3],
        a.dimensions[0],
        a.dimensions[1],
        a.dimensions[2],
        a.location[0],
        a.location[1],
        a.location[2],
        a.yaw
    );
    if let Some(sc) = score {
        s.push_str(&format!(" {sc:.4}"));
    }
    s
}

/// Lossless label line (shortest round-trip float formatting).
pub fn format_kitti_label_exact(a: &SceneAnnotation) -> String {
    format!(
        "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
        a.class.kitti_name(),
        a.truncation,
        a.occlusion,
        a.alpha,
        a.bbox2d[0],
        a.bbox2d[1],
        a.bbox2d[2],
        a.bbox2d[3],
        a.dimensions[0],
        a.dimensions[1],
        a.dimensions[2],
        a.location[0],
        a.location[1],
        a.location[2],
        a.yaw
    )
}

fn p2_numbers(text: &str) -> Result<Vec<f64>> {
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| l.starts_with("P2:"))
        .ok_or(Error::MissingP2)?;
    let nums = line["P2:".len()..]
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::CalibFormat(format!("not a number: {t:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if nums.len() != 12 {
        return Err(Error::CalibFormat(format!(
            "expected 12 numbers, found {}",
            nums.len()
        )));
    }
    Ok(nums)
}

pub fn parse_kitti_calib(text: &str) -> Result<CalibMatrix> {
    let nums = p2_numbers(text)?;
    let mut p2 = [[0.0; 4]; 3];
    for (i, v) in nums.into_iter().enumerate() {
        p2[i / 4][i % 4] = v;
    }
    CalibMatrix::new(p2)
}

/// Single `P2:` line with shortest round-trip formatting.
pub fn serialize_kitti_calib(calib: &CalibMatrix) -> String {
    let nums: Vec<String> = calib.p2.iter().flatten().map(|v| format!("{v}")).collect();
    format!("P2: {}\n", nums.join(" "))
}

/// Canonical form of a calibration text: its P2 line alone, reformatted.
pub fn normalize_kitti_calib(text: &str) -> Result<String> {
    let nums: Vec<String> = p2_numbers(text)?.iter().map(|v| format!("{v}")).collect();
    Ok(format!("P2: {}\n", nums.join(" ")))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn car_line_maps_fields_by_position() {
        let a = parse_kitti_label(
            "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59",
        )
        .unwrap();
        assert_eq!(a.class, ObjectClass::Car);
        assert_eq!(a.truncation, 0.0);
        assert_eq!(a.occlusion, 0);
        assert_eq!(a.alpha, -1.58);
        assert_eq!(a.bbox2d, [587.01, 173.33, 614.12, 200.12]);
        assert_eq!(a.dimensions, [1.65, 1.67, 3.64]);
        assert_eq!(a.location, [-0.65, 1.71, 46.70]);
        assert_eq!(a.yaw, -1.59);
    }

    #[test]
    fn dontcare_and_unknown_classes_are_ignored() {
        let a = parse_kitti_label(
            "DontCare -1 -1 -10 500 160 520 170 -1 -1 -1 -1000 -1000 -1000 -10",
        )
        .unwrap();
        assert_eq!(a.class, ObjectClass::Ignore);
        assert_eq!(a.occlusion, -1);
        assert_eq!(a.location, [-1000.0; 3]);
        let p = parse_kitti_label(
            "Pedestrian 0 0 0 1 2 3 4 1.7 0.6 0.8 1 1.6 10 0.2",
        )
        .unwrap();
        assert_eq!(p.class, ObjectClass::Ignore);
    }

    #[test]
    fn short_line_is_an_arity_error() {
        let e = parse_kitti_label("Car 0 0 -1.5 1 2 3 4 1.6 1.6 3.6 0 1.7 20").unwrap_err();
        assert!(matches!(e, Error::LabelArity { got: 14 }));
    }

    #[test]
    fn bad_number_names_the_field() {
        let e = parse_kitti_label("Car 0 0 -1.5 1 2 x 4 1.6 1.6 3.6 0 1.7 20 0.1").unwrap_err();
        assert!(matches!(e, Error::LabelField { index: 6, .. }));
    }

    #[test]
    fn score_column_is_accepted() {
        let a = parse_kitti_label("Car 0 0 0 1 2 3 4 1.6 1.6 3.6 0 1.7 20 0.1 0.87").unwrap();
        assert_eq!(a.yaw, 0.1);
    }

    #[test]
    fn calib_examples() {
        let c = parse_kitti_calib("P0: 1 2 3\nP2: 1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert_eq!(c.p2, [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        assert!(matches!(parse_kitti_calib("P1: 1 0 0"), Err(Error::MissingP2)));
        assert!(parse_kitti_calib("P2: 1 0 0").is_err());
    }

    proptest! {
        #[test]
        fn calib_round_trips(vals in proptest::collection::vec(-1e3f64..1e3, 12), f in 1f64..2e3) {
            let mut p2 = [[0.0; 4]; 3];
            for (i, v) in vals.iter().enumerate() {
                p2[i / 4][i % 4] = *v;
            }
            p2[0][0] = f;
            p2[1][1] = f;
            let text = format!(
                "P0: 0 0 0\nP2: {}\nR0_rect: 1 0 0\n",
                p2.iter().flatten().map(|v| format!("{v:e}")).collect::<Vec<_>>().join("  ")
            );
            let parsed = parse_kitti_calib(&text).unwrap();
            prop_assert_eq!(serialize_kitti_calib(&parsed), normalize_kitti_calib(&text).unwrap());
            prop_assert_eq!(parse_kitti_calib(&serialize_kitti_calib(&parsed)).unwrap(), parsed);
        }

        #[test]
        fn exact_label_lines_round_trip(x in -20f64..20.0, z in 1f64..60.0, yaw in -3.1f64..3.1) {
            let a = SceneAnnotation {
                class: ObjectClass::Car,
                truncation: 0.0,
                occlusion: 1,
                alpha: yaw * 0.5,
                bbox2d: [10.0, 20.5, 30.25, 40.0],
                dimensions: [1.5, 1.6, 3.9],
                location: [x, 1.65, z],
                yaw,
            };
            prop_assert_eq!(parse_kitti_label(&format_kitti_label_exact(&a)).unwrap(), a);
        }
    }
}
