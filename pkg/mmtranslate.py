#!/usr/bin/env python3
"""
mmtranslate - multimodal sequence-to-sequence modality translation toolkit
"""

from cli import main

if __name__ == '__main__':
    main()
