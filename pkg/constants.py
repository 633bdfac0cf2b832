import os
from dotenv import load_dotenv

load_dotenv()

ENVIRONMENT = os.getenv("ENVIRONMENT", "development")
LOG_DIR = os.getenv("LOG_DIR", "logs")
DEFAULT_OUTPUT_DIR = os.getenv("DEFAULT_OUTPUT_DIR", "runs/default")

# Inference service
HOST = os.getenv("HOST", "0.0.0.0")
PORT = os.getenv("PORT", 6000)

# Prefix for pipeline config overrides: CVM_<SECTION>_<KEY>
ENV_OVERRIDE_PREFIX = "CVM_"

# Parameter-analysis grid
PATCH_SIZE_GRID = (5, 7, 9, 11, 13, 15, 17)
PCA_COUNT_GRID = (10, 15, 20, 25, 30, 35)

# Optimal (patch size, PCA count) per dataset plus scene facts
DATASET_PRESETS = {
    "houston": {
        "patch_size": 17,
        "pca_bands": 25,
        "raw_bands": 144,
        "image_size": (1905, 349),
        "class_names": [
            "Healthy Grass", "Stressed Grass", "Synthetic Grass", "Tree", "Soil",
            "Water", "Residential", "Commercial", "Road", "Highway", "Railway",
            "Parking Lot1", "Parking Lot2", "Tennis Court", "Running Track",
        ],
    },
    "quh-pingan": {
        "patch_size": 13,
        "pca_bands": 15,
        "raw_bands": 176,
        "image_size": (1230, 1000),
        "class_names": [
            "Ship", "Seawater", "Trees", "Concrete structure building", "Floating pier",
            "Brick houses", "Steel houses", "Wharf construction land", "Car", "Road",
        ],
    },
    "quh-qingyun": {
        "patch_size": 11,
        "pca_bands": 15,
        "raw_bands": 270,
        "image_size": (880, 1360),
        "class_names": [
            "Trees", "Concrete building", "Car", "Ironhide building",
            "Plastic playground", "Asphalt road",
        ],
    },
    "quh-tangdaowan": {
        "patch_size": 9,
        "pca_bands": 20,
        "raw_bands": 176,
        "image_size": (1740, 860),
        "class_names": [
            "Rubber track", "Flaggingv", "Sandy", "Asphalt", "Boardwalk", "Rocky shallows",
            "Grassland", "Bulrush", "Gravel road", "Ligustrum vicaryi", "Coniferous pine",
            "Spiraea", "Bare soil", "Buxus sinica", "Photinia serrulata", "Populus",
            "Ulmus pumila L", "Seawater",
        ],
    },
}
