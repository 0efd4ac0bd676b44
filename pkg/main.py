from dotenv import load_dotenv

load_dotenv()

from otpbase.cli import main

if __name__ == "__main__":
    main()
