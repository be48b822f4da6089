use lift3d::Error;

pub const CONFIG: u8 = 2;
pub const MISSING_ARTIFACT: u8 = 3;
pub const NUMERICAL: u8 = 4;
pub const EMPTY_OCCUPANCY: u8 = 5;
pub const OTHER: u8 = 1;

pub fn code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => CONFIG,
        Error::MissingArtifact(_) => MISSING_ARTIFACT,
        Error::Numerical(_) => NUMERICAL,
        Error::EmptyOccupancy => EMPTY_OCCUPANCY,
        _ => OTHER,
    }
}
