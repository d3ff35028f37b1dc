use std::path::Path;

use super::{validate_trajectory, NominalTrajectory, TrajOptError};

pub fn save_trajectory(traj: &NominalTrajectory, path: &Path) -> Result<(), TrajOptError> {
    let text =
        serde_json::to_string_pretty(traj).map_err(|e| TrajOptError::ParseError(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| TrajOptError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a trajectory and checks every invariant before returning it.
pub fn load_trajectory(path: &Path) -> Result<NominalTrajectory, TrajOptError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrajOptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let traj: NominalTrajectory =
        serde_json::from_str(&text).map_err(|e| TrajOptError::ParseError(e.to_string()))?;
    validate_trajectory(&traj)?;
    Ok(traj)
}

/// One row per step: `i,t`, the eight state channels, then the eight inputs
/// (blank on the terminal row).
pub fn write_trajectory_csv<W: std::io::Write>(
    traj: &NominalTrajectory,
    out: W,
) -> Result<(), csv::Error> {
    const HEADER: [&str; 18] = [
        "i", "t", "x", "y", "theta", "xd", "yd", "thetad", "phi", "w", "fn", "ft", "f1", "f1t",
        "f2", "f2t", "phid", "wd",
    ];
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for (i, s) in traj.states.iter().enumerate() {
        let mut row = vec![i.to_string(), (i as f64 * traj.dt).to_string()];
        row.extend(s.iter().map(|v| v.to_string()));
        match traj.controls.get(i) {
            Some(u) => row.extend(u.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), 8)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
