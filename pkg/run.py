from dotenv import load_dotenv

load_dotenv()
from tncompress.main import app

if __name__ == "__main__":
    app()
