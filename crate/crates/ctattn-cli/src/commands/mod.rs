pub mod bench;
pub mod mtpp;
pub mod spiral;
pub mod verify;
