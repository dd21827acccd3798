//! Feeds arbitrary bytes to the pose-file loaders. Parsing must never
//! panic; accepted sequences must survive a write/read round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use poselift::skeleton::io::{read_pose2d, read_pose3d, write_pose2d, write_pose3d};

fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 20 {
        return;
    }
    if let Ok(pose) = read_pose2d(data) {
        let mut buf = Vec::new();
        write_pose2d(&mut buf, &pose).unwrap();
        let back = read_pose2d(buf.as_slice()).unwrap();
        assert_eq!(back, pose);
    }
    if let Ok(pose) = read_pose3d(data) {
        let mut buf = Vec::new();
        write_pose3d(&mut buf, &pose).unwrap();
        let back = read_pose3d(buf.as_slice()).unwrap();
        assert_eq!(back, pose);
    }
});
