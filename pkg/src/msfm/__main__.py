from msfm.cli import main

main()
