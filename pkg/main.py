import sys
import logging
import os
import traceback

# [Infra] Keep Qt quiet (must be set before QtCore is imported)
os.environ.setdefault("QT_LOGGING_RULES", "*.debug=false")

LOG_FORMAT = "[%(asctime)s] [%(levelname)s] [%(module)s] %(message)s"


def setup_logging(debug: bool):
    """stdout always; with --debug also logs/debug.log at DEBUG level."""
    handlers = [logging.StreamHandler(sys.stdout)]
    if debug:
        log_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), "logs")
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, "debug.log"), encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(file_handler)
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO, format=LOG_FORMAT, handlers=handlers)


def install_crash_handler():
    def crash_handler(etype, value, tb):
        err_msg = "".join(traceback.format_exception(etype, value, tb))
        print(f"\nCRITICAL ERROR:\n{err_msg}")
        logging.critical(f"Uncaught Exception:\n{err_msg}")
        sys.exit(1)

    sys.excepthook = crash_handler


if __name__ == "__main__":
    argv = sys.argv[1:]
    debug_mode = "--debug" in argv
    setup_logging(debug_mode)
    if debug_mode:
        logging.info("=== lorentz-lab 已启动（调试模式） ===")
        install_crash_handler()

    from src.cli import run
    sys.exit(run(argv))
