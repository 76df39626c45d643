use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All evaluation numbers of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub mean_ap: f64,
    #[serde(rename = "AMOTA")]
    pub amota: f64,
    /// Map IoU keyed by element class.
    pub map_iou: BTreeMap<String, f64>,
    pub occ_iou_near: f64,
    pub occ_iou_far: f64,
    /// `None` when nothing was forecast.
    pub min_ade: Option<f64>,
    pub min_fde: Option<f64>,
    pub miss_rate: Option<f64>,
    pub l2: [f64; 3],
    pub l2_avg: f64,
    pub collision: [f64; 3],
    pub collision_avg: f64,
    pub bps: f64,
}

impl MetricsReport {
    /// Checks rates lie in `[0, 1]` and distances are nonnegative.
    pub fn validate(&self) -> Result<()> {
        let mut rates = vec![
            ("mAP", self.mean_ap),
            ("AMOTA", self.amota),
            ("occ_iou_near", self.occ_iou_near),
            ("occ_iou_far", self.occ_iou_far),
            ("collision_avg", self.collision_avg),
        ];
        rates.extend(self.collision.iter().map(|&c| ("collision", c)));
        rates.extend(self.map_iou.values().map(|&v| ("map_iou", v)));
        rates.extend(self.miss_rate.map(|v| ("MR", v)));
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("{name} = {v} outside [0, 1]")));
            }
        }
        let mut dists = vec![("l2_avg", self.l2_avg), ("bps", self.bps)];
        dists.extend(self.l2.iter().map(|&v| ("l2", v)));
        dists.extend(self.min_ade.map(|v| ("minADE", v)));
        dists.extend(self.min_fde.map(|v| ("minFDE", v)));
        for (name, v) in dists {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("{name} = {v} must be a finite nonnegative value")));
            }
        }
        Ok(())
    }

    /// Field-wise mean. Optional fields average over the reports that have
    /// them; map classes over the reports that contain them.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Undefined("mean of zero reports".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mut classes: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in reports {
            for (k, &v) in &r.map_iou {
                classes.entry(k.clone()).or_default().push(v);
            }
        }
        Ok(MetricsReport {
            mean_ap: avg(&|r| r.mean_ap),
            amota: avg(&|r| r.amota),
            map_iou: classes
                .into_iter()
                .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
                .collect(),
            occ_iou_near: avg(&|r| r.occ_iou_near),
            occ_iou_far: avg(&|r| r.occ_iou_far),
            min_ade: opt(&|r| r.min_ade),
            min_fde: opt(&|r| r.min_fde),
            miss_rate: opt(&|r| r.miss_rate),
            l2: [avg(&|r| r.l2[0]), avg(&|r| r.l2[1]), avg(&|r| r.l2[2])],
            l2_avg: avg(&|r| r.l2_avg),
            collision: [avg(&|r| r.collision[0]), avg(&|r| r.collision[1]), avg(&|r| r.collision[2])],
            collision_avg: avg(&|r| r.collision_avg),
            bps: avg(&|r| r.bps),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Column names of [`MetricsReport::csv_row`].
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = vec!["mAP".into(), "AMOTA".into()];
        h.extend(self.map_iou.keys().map(|k| format!("IoU-{k}")));
        h.extend(
            [
                "IoU-n", "IoU-f", "minADE", "minFDE", "MR", "L2-1s", "L2-2s", "L2-3s", "L2-avg",
                "CR-1s", "CR-2s", "CR-3s", "CR-avg", "BPS",
            ]
            .map(String::from),
        );
        h
    }

    /// Values in full precision; absent optional values are empty.
    pub fn csv_row(&self) -> Vec<String> {
        let f = |v: f64| v.to_string();
        let o = |v: Option<f64>| v.map(f).unwrap_or_default();
        let mut r = vec![f(self.mean_ap), f(self.amota)];
        r.extend(self.map_iou.values().map(|&v| f(v)));
        r.extend([f(self.occ_iou_near), f(self.occ_iou_far)]);
        r.extend([o(self.min_ade), o(self.min_fde), o(self.miss_rate)]);
        r.extend(self.l2.iter().map(|&v| f(v)));
        r.push(f(self.l2_avg));
        r.extend(self.collision.iter().map(|&v| f(v)));
        r.push(f(self.collision_avg));
        r.push(f(self.bps));
        r
    }

    /// Header plus one row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.csv_header()).map_err(csv_err)?;
        w.write_record(self.csv_row()).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        MetricsReport {
            mean_ap: 0.5,
            amota: 0.25,
            map_iou: BTreeMap::from([("lane".to_string(), 0.4)]),
            occ_iou_near: 0.3,
            occ_iou_far: 0.2,
            min_ade: Some(1.5),
            min_fde: Some(2.5),
            miss_rate: Some(0.1),
            l2: [0.1, 0.2, 0.3],
            l2_avg: 0.2,
            collision: [0.0, 0.0, 1.0],
            collision_avg: 1.0 / 3.0,
            bps: 3_096_000.0,
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = sample();
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().unwrap().contains("\"mAP\""));
    }

    #[test]
    fn csv_shape() {
        let r = sample();
        assert_eq!(r.csv_header().len(), r.csv_row().len());
        let text = r.to_csv().unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("mAP,AMOTA,IoU-lane,IoU-n"));
        assert!(lines.next().unwrap().ends_with(",3096000"));
        let none = MetricsReport { min_ade: None, ..r };
        assert_eq!(none.csv_row()[5], "");
    }

    #[test]
    fn validation() {
        assert!(sample().validate().is_ok());
        assert!(MetricsReport { amota: 1.5, ..sample() }.validate().is_err());
        assert!(MetricsReport { min_ade: Some(-1.0), ..sample() }.validate().is_err());
    }

    #[test]
    fn mean_skips_missing_options() {
        let a = sample();
        let b = MetricsReport { min_ade: None, mean_ap: 1.0, ..sample() };
        let m = MetricsReport::mean(&[a, b]).unwrap();
        assert_eq!(m.mean_ap, 0.75);
        assert_eq!(m.min_ade, Some(1.5));
        assert!(MetricsReport::mean(&[]).is_err());
    }
}
