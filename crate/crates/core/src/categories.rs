//! Closed category vocabulary of the corpus: general classes, fine-grained
//! concepts and part-level classes. Spellings are kept exactly as released.

pub const CATEGORY_COUNT: usize = 122;

pub const CATEGORIES: [&str; CATEGORY_COUNT] = [
    // general (65)
    "airplane",
    "airport",
    "airport runway",
    "bare land",
    "baseball diamond",
    "baseball field",
    "basketball court",
    "beach",
    "bridge",
    "bridge road",
    "building",
    "bushes",
    "canal",
    "chimney",
    "cooling tower",
    "dam",
    "expressway service area",
    "expressway toll station",
    "farmland",
    "football field",
    "golf field",
    "grass",
    "green strip",
    "greenhouse",
    "ground track field",
    "harbor",
    "helicopter",
    "helipad",
    "intersection",
    "jet bridge",
    "lake",
    "large vehicle",
    "overpass",
    "parking lot",
    "path",
    "paved road",
    "paved square",
    "plane",
    "playground",
    "railway",
    "river",
    "road",
    "roundabout",
    "sea",
    "ship",
    "slide",
    "small car",
    "small vehicle",
    "soccer ball field",
    "solar panel",
    "sports field",
    "stadium",
    "storage tank",
    "substation",
    "swimming pool",
    "tennis court",
    "terminal",
    "train station",
    "tree",
    "unimproved road",
    "vehicle",
    "volleyball court",
    "water",
    "white smoke",
    "windmill",
    // fine-grained concepts (31)
    "B1-B boomber",
    "a220",
    "a321",
    "a330",
    "a350",
    "arj21",
    "boeing737",
    "boeing747",
    "boeing777",
    "boeing787",
    "bus",
    "c919",
    "cargo truck",
    "container crane",
    "dry cargo ship",
    "dockside warehouse",
    "dump truck",
    "driveway",
    "engineering ship",
    "excavator",
    "fishing boat",
    "hangar",
    "liquid cargo ship",
    "motorboat",
    "passenger ship",
    "tractor",
    "trailer",
    "truck tractor",
    "tugboat",
    "van",
    "warship",
    // part-level classes (26)
    "airplane engine",
    "bleachers",
    "bow of ship",
    "cargo hold",
    "center circle",
    "center line",
    "center service line",
    "cooling tower shell",
    "cooling tower top opening",
    "downstream",
    "football net",
    "fuselage",
    "horizontal stabilizer",
    "industrial pipeline",
    "net",
    "no man's land of tennis court",
    "riverbank",
    "service box",
    "shipping container",
    "stern of ship",
    "tennis net",
    "three-point line",
    "upstream",
    "wake",
    "wing",
    "zebra crossing",
];

pub fn is_known_category(name: &str) -> bool {
    CATEGORIES.contains(&name)
}
