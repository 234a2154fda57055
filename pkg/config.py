import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', '')

    # Parallelism and reproducibility
    THREADS = int(os.getenv('LSUSS_THREADS', 1))
    SEED = int(os.getenv('LSUSS_SEED', 0))

    # Matrix profile / arc curve
    IAC_TRIALS = int(os.getenv('IAC_TRIALS', 200))
    ORACLE_CAP = int(os.getenv('ORACLE_CAP', 4096))
    SCALER_EPS = float(os.getenv('SCALER_EPS', 1e-12))

    # Autoencoder training
    AE_LEARNING_RATE = float(os.getenv('AE_LEARNING_RATE', 1e-3))
    AE_BATCH_SIZE = int(os.getenv('AE_BATCH_SIZE', 64))
    AE_MAX_EPOCHS = int(os.getenv('AE_MAX_EPOCHS', 100))
    AE_PATIENCE = int(os.getenv('AE_PATIENCE', 10))
    AE_VAL_FRACTION = float(os.getenv('AE_VAL_FRACTION', 0.2))

    # Change-point extraction
    LTEA_THRESHOLD = float(os.getenv('LTEA_THRESHOLD', -1.0))
    EXCLUSION_FACTOR = int(os.getenv('EXCLUSION_FACTOR', 5))
