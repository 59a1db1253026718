pub mod inspect;
pub mod merge;
pub mod simulate;
pub mod sweep;
pub mod toy;
